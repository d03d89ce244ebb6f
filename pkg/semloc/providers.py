"""
Embedding flywheel: callers register the keys they will need, and the first
cache miss embeds every pending key in one batched forward pass.
"""
import typing
from abc import ABCMeta, abstractmethod as abstract_method
from collections import defaultdict as default_dict

import numpy as np

from semloc.encoder import Encoder
from semloc.exceptions import with_context
from semloc.scene_graph import SceneGraph, ego_graph

__all__ = [
    'BaseEmbeddingProvider',
    'CoalitionValueProvider',
    'EgoGraphEmbeddingProvider',
    'ParameterisedDefaultDict',
    'SceneVariantDelegate',
]

TKey = typing.TypeVar('TKey', bound=typing.Hashable)
TVal = typing.TypeVar('TVal')
T = typing.TypeVar('T')


class ParameterisedDefaultDict(default_dict):
    """
    A :py:class:`default_dict` whose factory receives the missing key.
    """

    def __init__(self,
            default_factory: typing.Optional[typing.Callable[..., T]] = None,
            *args: typing.Any,
            **kwargs: typing.Any,
    ) -> None:
        """
        :param default_factory:
            Called as ``default_factory(key, *args, **kwargs)``.
        """
        super(ParameterisedDefaultDict, self).__init__(default_factory)

        self._factory_args = args
        self._factory_kwargs = kwargs

    def __missing__(self, key: typing.Hashable) -> T:
        if not self.default_factory:
            raise KeyError(key)

        # noinspection PyArgumentList
        self[key] = value = self.default_factory(
            key,
            *self._factory_args,
            **self._factory_kwargs
        )

        return value


class BaseEmbeddingProvider(typing.Generic[TKey, TVal], metaclass=ABCMeta):
    """
    Bulk-computes values (embeddings, coalition scores) for registered keys
    and hands them out one at a time.
    """

    def __init__(self):
        super(BaseEmbeddingProvider, self).__init__()

        self._cache: typing.Dict[typing.Hashable, TVal] = {}

        self._pending_load_keys: typing.Set[typing.Hashable] = set()
        """
        Registered keys whose values have not been computed yet.
        """

        self._pending_cache_keys: typing.Dict[
            typing.Hashable,
            typing.Set[typing.Hashable]
        ] = default_dict(set)
        """
        Cache keys awaiting each load key; backfilled with the empty result if
        the backend skips them.
        """

        self.batches_loaded = 0
        """
        Number of backend calls made so far.
        """

    def __getitem__(self, key: TKey) -> TVal:
        """
        Returns the value for ``key``, computing all pending keys on a miss.

        :raise:
            - :py:class:`ValueError` if ``key`` was not registered first.
        """
        cache_key = self.gen_cache_key(key)
        if cache_key is None:
            return self.gen_empty_result()

        try:
            return self._cache[cache_key]
        except KeyError:
            pass

        load_key = self.gen_load_key(key)
        if load_key is None:
            return self.gen_empty_result()

        # Loading unregistered keys one by one would defeat the batching.
        if load_key not in self._pending_load_keys:
            raise with_context(
                ValueError(f'Attempting to get data for unregistered key {key!r}.'),

                context={
                    'cacheKey': cache_key,
                    'loadKey': load_key,
                    'key': key,
                },
            )

        self.warm_cache()
        return self._cache[cache_key]

    def __contains__(self, key: TKey) -> bool:
        return self.gen_cache_key(key) in self._cache

    @abstract_method
    def fetch_from_backend(self, load_keys: typing.Set[typing.Hashable]) -> \
            typing.Union[
                typing.Mapping[typing.Hashable, TVal],
                typing.Iterable[typing.Tuple[typing.Hashable, TVal]],
            ]:
        """
        Computes values for ``load_keys`` in one batch.

        :return:
            A mapping (or iterable of pairs) keyed by cache key.
        """
        raise NotImplementedError(
            'Not implemented in {cls}.'.format(cls=type(self).__name__),
        )

    def gen_load_key(self, key: TKey) -> typing.Optional[typing.Hashable]:
        """
        Key handed to the backend; ``None`` means "always empty".
        """
        return key

    def gen_cache_key(self, key: TKey) -> typing.Optional[typing.Hashable]:
        return self.gen_load_key(key)

    def gen_empty_result(self) -> typing.Optional[TVal]:
        return None

    def register(self, keys: typing.Iterable[TKey]) -> None:
        for key in keys:
            load_key = self.gen_load_key(key)
            if load_key is None:
                continue

            cache_key = self.gen_cache_key(key)
            if cache_key is not None and cache_key not in self._cache:
                self._pending_load_keys.add(load_key)
                self._pending_cache_keys[load_key].add(cache_key)

    def warm_cache(self) -> None:
        """
        Computes every pending key now rather than on the next miss.
        """
        if self._pending_load_keys:
            self._load_batch(set(self._pending_load_keys))

    def _load_batch(self, load_keys: typing.Set[typing.Hashable]) -> None:
        loaded = self.fetch_from_backend(load_keys)
        self.batches_loaded += 1

        if isinstance(loaded, typing.Mapping):
            loaded = loaded.items()

        for cache_key, value in loaded:
            self._cache[cache_key] = value

        for lk in load_keys:
            for pck in self._pending_cache_keys.pop(lk, ()):
                self._cache.setdefault(pck, self.gen_empty_result())

        self._pending_load_keys -= load_keys


class EgoGraphEmbeddingProvider(BaseEmbeddingProvider[int, np.ndarray]):
    """
    Inference embeddings of a scene's ego graphs, keyed by place id.

    Unknown place ids yield ``None``.
    """

    def __init__(self,
            scene: SceneGraph,
            encoder: Encoder,
            hops: typing.Optional[int] = None,
    ) -> None:
        super(EgoGraphEmbeddingProvider, self).__init__()

        self.scene = scene
        self.encoder = encoder
        self.hops = encoder.hops if hops is None else hops

    def gen_load_key(self, key: int) -> typing.Optional[int]:
        return key if key in self.scene.place_index else None

    def fetch_from_backend(self, load_keys: typing.Set[int]) \
            -> typing.Dict[int, np.ndarray]:
        ordered = sorted(load_keys)
        z = self.encoder.embed_many(
            [ego_graph(self.scene, p, self.hops) for p in ordered],
        )
        return dict(zip(ordered, z))

    def matrix(self, place_ids: typing.Sequence[int]) -> np.ndarray:
        """
        Embeddings of ``place_ids`` stacked in order (one row each).
        """
        self.register(place_ids)
        if not place_ids:
            return np.zeros((0, self.encoder.params.config.embedding_dim))
        return np.stack([self[p] for p in place_ids])


class SceneVariantDelegate:
    """
    Routes ``(variant_key, place_id)`` lookups to one embedding provider per
    scene variant, created on first use.

    ``variant_key`` ``None`` conventionally denotes the unmodified scene;
    class-ablated scenes are keyed by the removed label.
    """

    def __init__(self,
            factory: typing.Callable[[typing.Hashable], BaseEmbeddingProvider],
    ) -> None:
        super(SceneVariantDelegate, self).__init__()

        self._delegates: typing.Dict[typing.Hashable, BaseEmbeddingProvider] = \
            ParameterisedDefaultDict(factory)

    def __getitem__(self, value: typing.Tuple[typing.Hashable, int]) -> typing.Any:
        variant_key, place_id = value
        return self.get_data_provider(variant_key)[place_id]

    def get_data_provider(self, variant_key: typing.Hashable) \
            -> BaseEmbeddingProvider:
        return self._delegates[variant_key]

    def register(self,
            values: typing.Iterable[typing.Tuple[typing.Hashable, int]],
    ) -> None:
        grouped = default_dict(list)
        for variant_key, place_id in values:
            grouped[variant_key].append(place_id)

        for variant_key, place_ids in grouped.items():
            self._delegates[variant_key].register(place_ids)

    @property
    def variants(self) -> typing.List[typing.Hashable]:
        return list(self._delegates)


class CoalitionValueProvider(BaseEmbeddingProvider[typing.AbstractSet[int], float]):
    """
    Caches a set function ``v(S)`` over coalitions of object ids.

    :param evaluate:
        Maps a list of coalitions to their values, in order.
    """

    def __init__(self,
            evaluate: typing.Callable[
                [typing.List[typing.FrozenSet[int]]],
                typing.Sequence[float],
            ],
    ) -> None:
        super(CoalitionValueProvider, self).__init__()

        self.evaluate = evaluate

    def gen_load_key(self, key: typing.AbstractSet[int]) -> typing.FrozenSet[int]:
        return frozenset(key)

    def fetch_from_backend(self, load_keys: typing.Set[typing.FrozenSet[int]]) \
            -> typing.Iterable[typing.Tuple[typing.FrozenSet[int], float]]:
        ordered = sorted(load_keys, key=lambda s: (len(s), sorted(s)))
        return zip(ordered, (float(v) for v in self.evaluate(ordered)))
