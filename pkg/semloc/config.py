"""
JSON configuration files for the frozen config dataclasses.

Precedence: explicit overrides > file values > dataclass defaults.
"""
import dataclasses
import json
import os
import typing

from semloc.exceptions import with_context
from semloc.scene_graph import SemanticClass

__all__ = [
    'OUTPUT_ROOT_ENV',
    'default_output_root',
    'load_config',
]

OUTPUT_ROOT_ENV = 'SEMLOC_OUTPUT_ROOT'

TConfig = typing.TypeVar('TConfig')


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, 'out')


def _coerce(field: dataclasses.Field, value: typing.Any) -> typing.Any:
    # JSON has no tuples; the taxonomy is a tuple of records.
    if field.name == 'taxonomy' and isinstance(value, list):
        return tuple(
            c if isinstance(c, SemanticClass) else SemanticClass(**c)
            for c in value
        )
    if isinstance(value, list):
        return tuple(value)
    return value


def load_config(
        path: typing.Optional[typing.Union[str, os.PathLike]],
        cls: typing.Type[TConfig],
        overrides: typing.Optional[typing.Mapping[str, typing.Any]] = None,
        section: typing.Optional[str] = None,
) -> TConfig:
    """
    Builds a ``cls`` instance from a JSON object file plus overrides.

    :param path:
        Config file, or ``None`` to start from the defaults.

    :param overrides:
        Values that win over the file; ``None`` values are ignored so that
        unset command-line flags fall through.

    :param section:
        If set, read this key of the top-level object instead of the whole
        object (lets one file configure several components).

    :raise:
        - :py:class:`ValueError` for malformed JSON, a non-object document or
          unknown keys.
    """
    values: typing.Dict[str, typing.Any] = {}

    if path is not None:
        with open(path, encoding='utf-8') as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise with_context(
                    ValueError('Config file is not valid JSON.'),
                    context={'path': str(path), 'line': e.lineno, 'column': e.colno},
                ) from e

        if section is not None and isinstance(document, dict):
            document = document.get(section, {})

        if not isinstance(document, dict):
            raise with_context(
                ValueError('Config file must contain a JSON object.'),
                context={'path': str(path), 'section': section},
            )
        values.update(document)

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise with_context(
            ValueError('Unknown configuration keys.'),
            context={'config': cls.__name__, 'unknown': unknown},
        )

    return cls(**{k: _coerce(fields[k], v) for k, v in values.items()})
