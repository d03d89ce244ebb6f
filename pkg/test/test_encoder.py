import json
import os
import tempfile
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis.strategies import integers

from semloc import autodiff as ad
from semloc.encoder import Encoder, GraphBatch, ModelConfig, bow_embed, embed, \
    forward, init_params, load_checkpoint, save_checkpoint
from semloc.exceptions import CheckpointError, SceneValidationError
from semloc.scene_graph import OFFICE_TAXONOMY, EgoGraph, ego_graph, ego_graphs
from semloc.testing import TINY_MODEL, chain_scene, random_scene, tiny_encoder, \
    toy_scene


def shuffled(g: EgoGraph, seed: int) -> EgoGraph:
    """
    The same ego graph with its nodes listed in a different order.
    """
    order = np.random.default_rng(seed).permutation(len(g.nodes))
    return EgoGraph(
        centre=g.centre,
        nodes=tuple(g.nodes[k] for k in order),
        labels=tuple(g.labels[k] for k in order),
        edges_traversability=tuple(reversed(g.edges_traversability)),
        edges_visibility=tuple(reversed(g.edges_visibility)),
    )


class EncoderTestCase(TestCase):
    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_node_order_does_not_matter(self, seed):
        scene = random_scene(seed)
        encoder = tiny_encoder(seed)
        g = ego_graph(scene, 0, hops=1)

        z, _ = encoder.embed(g)
        z_shuffled, _ = encoder.embed(shuffled(g, seed))
        np.testing.assert_allclose(z, z_shuffled, atol=1e-10)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_unit_embeddings(self, seed):
        scene = random_scene(seed)
        z = tiny_encoder(seed).embed_many(ego_graphs(scene, [p.id for p in scene.places], 1))

        self.assertTupleEqual(z.shape, (len(scene.places), TINY_MODEL.embedding_dim))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)

    def test_batching_does_not_change_embeddings(self):
        scene = random_scene(4)
        graphs = ego_graphs(scene, [p.id for p in scene.places], 1)
        encoder = Encoder(init_params(4, TINY_MODEL), OFFICE_TAXONOMY, chunk_size=5)

        batched = encoder.embed_many(graphs)
        for row, g in zip(batched, graphs):
            np.testing.assert_allclose(row, encoder.embed(g)[0], atol=1e-12)

    def test_similarity_is_symmetric(self):
        scene = toy_scene()
        encoder = tiny_encoder(1)
        p, q = ego_graph(scene, 0, 1), ego_graph(scene, 3, 1)

        self.assertAlmostEqual(encoder.similarity(p, q), encoder.similarity(q, p))
        self.assertAlmostEqual(encoder.similarity(p, p), 1.0)

    def test_attention_is_normalised(self):
        """
        Each target's incoming coefficients sum to one, per head.
        """
        g = ego_graph(toy_scene(), 1, hops=1)
        _, record = tiny_encoder(2).embed(g)

        self.assertEqual(record.heads, TINY_MODEL.heads)
        for target in set(record.targets):
            mask = np.array(record.targets) == target
            np.testing.assert_allclose(record.coefficients[:, mask].sum(axis=1), 1.0)

    def test_without_attention(self):
        config = ModelConfig(hidden_dim=8, mpnn_layers=1, use_gat=False,
            embedding_dim=4, hops=1)
        encoder = tiny_encoder(0, config)
        z, record = encoder.embed(ego_graph(toy_scene(), 0, 1))

        self.assertAlmostEqual(float(np.linalg.norm(z)), 1.0)
        self.assertEqual(record.heads, 0)
        self.assertNotIn('gat.bias', encoder.params.tensors)

    def test_isolated_place(self):
        """
        A place with no neighbours and no objects still embeds.
        """
        g = EgoGraph(centre=7, nodes=(7,), labels=(None,), edges_traversability=(),
            edges_visibility=())
        z, record = tiny_encoder(0).embed(g)
        self.assertAlmostEqual(float(np.linalg.norm(z)), 1.0)

        # The lone centre attends to itself.
        self.assertTupleEqual((record.sources, record.targets), ((7,), (7,)))
        np.testing.assert_allclose(record.coefficients, 1.0)

    def test_self_loops_only_without_in_edges(self):
        g = ego_graph(toy_scene(), 1, hops=1)
        _, record = tiny_encoder(2).embed(g)
        self.assertFalse(any(s == t for s, t in zip(record.sources, record.targets)))

    def test_nodes_beyond_radius_do_not_matter(self):
        """
        Relabelling an object outside the ego graph leaves the embedding
        unchanged; relabelling one inside does not.
        """
        encoder = tiny_encoder(5)
        base = encoder.embed(ego_graph(chain_scene(5, (5, None, 10, 5, None)), 0, 1))[0]

        far = chain_scene(5, (5, None, 10, 11, None))
        np.testing.assert_array_equal(encoder.embed(ego_graph(far, 0, 1))[0], base)

        near = chain_scene(5, (11, None, 10, 5, None))
        self.assertFalse(np.allclose(encoder.embed(ego_graph(near, 0, 1))[0], base))

    def test_unknown_mode(self):
        params = init_params(0, TINY_MODEL)
        with self.assertRaises(ValueError):
            embed(ego_graph(toy_scene(), 0, 1), params, OFFICE_TAXONOMY, mode='eval')

    def test_train_mode_updates_running_statistics(self):
        params = init_params(0, TINY_MODEL)
        before = params.tensors['mpnn.0.bn.running_mean'].copy()

        embed(ego_graph(toy_scene(), 1, 1), params, OFFICE_TAXONOMY, mode='train')
        self.assertFalse(np.array_equal(before, params.tensors['mpnn.0.bn.running_mean']))

    def test_class_outside_taxonomy(self):
        g = ego_graph(toy_scene(), 3, 0)
        with self.assertRaises(SceneValidationError):
            GraphBatch([g], OFFICE_TAXONOMY[:2])

    def test_parameter_gradients(self):
        """
        Tape gradients through the whole encoder match finite differences.
        """
        scene = toy_scene()
        params = init_params(3, TINY_MODEL)
        batch = GraphBatch(ego_graphs(scene, [0, 2], 1), OFFICE_TAXONOMY)
        target = np.random.default_rng(0).normal(size=(2, TINY_MODEL.embedding_dim))

        names = params.trainable_names()
        self.assertIn('mpnn.0.bn.scale', names)
        self.assertIn('gat.bias', names)

        for name in names:
            def f(x, name=name):
                weights = dict(params.bind(), **{name: x})
                z, _ = forward(batch, weights, params)
                return ad.sum_all(z * target)

            with self.subTest(name=name):
                self.assertLess(ad.gradcheck(f, params.tensors[name]), 1e-5)


class BagOfWordsTestCase(TestCase):
    def test_histogram(self):
        g = ego_graph(toy_scene(), 1, hops=1)
        # Places 0, 1, 2 see a chair, a computer and a plant.
        np.testing.assert_allclose(bow_embed(g, OFFICE_TAXONOMY),
            np.array([1, 0, 1, 1, 0, 0]) / np.sqrt(3))

    def test_no_objects(self):
        g = EgoGraph(centre=0, nodes=(0,), labels=(None,), edges_traversability=(),
            edges_visibility=())
        np.testing.assert_array_equal(bow_embed(g, OFFICE_TAXONOMY), np.zeros(6))


class CheckpointTestCase(TestCase):
    def setUp(self):
        super().setUp()
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        self.path = os.path.join(self.directory.name, 'checkpoint.json')

    def test_round_trip(self):
        params = init_params(5, TINY_MODEL)
        save_checkpoint(params, OFFICE_TAXONOMY, self.path)
        loaded, taxonomy = load_checkpoint(self.path)

        self.assertEqual(loaded.config, TINY_MODEL)
        self.assertTupleEqual(taxonomy, OFFICE_TAXONOMY)
        self.assertSetEqual(set(loaded.tensors), set(params.tensors))
        for name, array in params.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], array)

    def test_wrong_format(self):
        with open(self.path, 'w') as f:
            json.dump({'format': 'something-else', 'version': 1}, f)

        with self.assertRaises(CheckpointError) as context:
            load_checkpoint(self.path)

        self.assertEqual(context.exception.context['format'], 'something-else')

    def test_mismatched_shape(self):
        save_checkpoint(init_params(0, TINY_MODEL), OFFICE_TAXONOMY, self.path)
        with open(self.path) as f:
            document = json.load(f)
        document['model']['hidden_dim'] = 16
        with open(self.path, 'w') as f:
            json.dump(document, f)

        with self.assertRaises(CheckpointError) as context:
            load_checkpoint(self.path)

        self.assertEqual(context.exception.context['tensor'], 'input.weight')

    def test_missing_tensor(self):
        save_checkpoint(init_params(0, TINY_MODEL), OFFICE_TAXONOMY, self.path)
        with open(self.path) as f:
            document = json.load(f)
        del document['tensors']['output.bias']
        with open(self.path, 'w') as f:
            json.dump(document, f)

        with self.assertRaises(CheckpointError) as context:
            load_checkpoint(self.path)

        self.assertListEqual(context.exception.context['missing'], ['output.bias'])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint(self.path)
