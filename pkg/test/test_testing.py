from unittest import TestCase

import numpy as np

from semloc.scene_graph import class_counts
from semloc.testing import TINY_SCENE, MockEmbeddingProvider, chain_scene, \
    tiny_dataset, toy_scene


class MockEmbeddingProviderTestCase(TestCase):
    def test_happy_path(self):
        """
        Typical usage of :py:class:`MockEmbeddingProvider`.
        """
        rows = {
            'alpha': np.array([1.0, 0.0]),
            'bravo': np.array([0.0, 1.0]),
            # Note that the backend will not return anything for ``charlie``.
        }
        provider = MockEmbeddingProvider(rows)

        # You can't get any values until you've registered the keys.
        with self.assertRaises(ValueError):
            # noinspection PyStatementEffect
            provider['alpha']

        provider.register(['alpha', 'bravo', 'charlie'])

        np.testing.assert_array_equal(provider['alpha'], [1.0, 0.0])
        np.testing.assert_array_equal(provider['bravo'], [0.0, 1.0])

        # The backend didn't return anything for ``charlie``.
        self.assertIsNone(provider['charlie'])


class FixtureTestCase(TestCase):
    def test_chain_scene(self):
        scene = chain_scene()
        self.assertEqual(len(scene.places), 5)
        self.assertTupleEqual(scene.visible_objects[2], (102,))
        self.assertEqual(class_counts(scene)[5], 2)

    def test_toy_scene(self):
        scene = toy_scene()
        self.assertTupleEqual(scene.neighbours[1], (0, 2))
        self.assertTupleEqual(scene.visible_objects[1], (10, 11, 12))

    def test_tiny_dataset(self):
        scene, split = tiny_dataset()
        side = TINY_SCENE.room_size

        self.assertEqual(len(scene.places), TINY_SCENE.rooms_x * TINY_SCENE.rooms_y * side * side)
        self.assertEqual(len(scene.objects), TINY_SCENE.n_objects)
        self.assertEqual(split.radius, 1.5)
