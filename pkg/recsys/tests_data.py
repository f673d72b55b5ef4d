import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from recsys.data import (
    PositiveIndex, RawInteraction, build_false_negative_set, build_index, ingest, load_snapshot,
    save_snapshot, split_leave_one_out, split_random,
)
from recsys.exceptions import (
    ConfigurationError, DataFormatError, EmptyDatasetError, MissingArtifactError, NoCandidateError,
)
from recsys.testing import dataset_from_pairs, toy_dataset, write_toy_ratings


class IngestTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text, encoding='utf-8')
        return path

    def test_threshold_keeps_high_ratings(self):
        path = self.write('ratings.dat', '1::50::5::978300760\n1::51::3::978300761\n')
        records = ingest(path, 'movielens_double_colon', positive_threshold=4)
        self.assertEqual([(r.user_id, r.item_id) for r in records], [('1', '50')])
        self.assertEqual(records[0].timestamp, 978300760)

    def test_without_threshold_keeps_everything(self):
        path = self.write('u.data', '1\t50\t5\t10\n1\t51\t3\t11\n')
        self.assertEqual(len(ingest(path)), 2)

    def test_comma_delimited_with_header_and_blank_lines(self):
        path = self.write('r.csv', 'user,item,rating,ts\n1,50,5,10\n\n2,50,4,11\n')
        records = ingest(path, positive_threshold=4, header=True)
        self.assertEqual([r.user_id for r in records], ['1', '2'])

    def test_bad_rating_names_line(self):
        path = self.write('u.data', '1\t50\t5\t10\n1\t51\tfive\t11\n')
        with self.assertRaises(DataFormatError) as ctx:
            ingest(path, positive_threshold=4)
        self.assertEqual(ctx.exception.line_number, 2)

    def test_invalid_utf8_names_line(self):
        path = self.dir / 'u.data'
        path.write_bytes(b'1\t2\t5\t1\n1\t\xff\xfe\t5\t2\n')
        with self.assertRaises(DataFormatError) as ctx:
            ingest(path)
        self.assertEqual(ctx.exception.line_number, 2)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_threshold_without_ratings(self):
        path = self.write('pairs.tsv', '1\t50\n2\t51\n')
        with self.assertRaises(ConfigurationError):
            ingest(path, positive_threshold=4)

    def test_everything_filtered(self):
        path = self.write('u.data', '1\t50\t1\t10\n')
        with self.assertRaises(EmptyDatasetError):
            ingest(path, positive_threshold=4)

    def test_missing_file(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            ingest(self.dir / 'nope.dat')
        self.assertIn('nope.dat', str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_empty_ids_rejected(self):
        with self.assertRaises(ValueError):
            RawInteraction('', '1')


class IndexTests(SimpleTestCase):
    def records(self, counts):
        out = []
        for u, n in enumerate(counts):
            out.extend(RawInteraction(f'u{u}', f'i{i}', 5.0, i) for i in range(n))
        return out

    def test_min_user_records_filter(self):
        ds = build_index(self.records([5, 4, 6]), min_user_records=5)
        self.assertEqual(ds.num_users, 2)
        self.assertEqual(ds.user_ids, ('u0', 'u2'))

    def test_duplicates_collapse_to_latest_timestamp(self):
        records = [RawInteraction('a', 'x', 5.0, 3), RawInteraction('a', 'y', 5.0, 4),
                   RawInteraction('a', 'x', 5.0, 9)]
        ds = build_index(records)
        self.assertEqual(ds.num_train, 2)
        row = int(np.flatnonzero(ds.train_pairs[:, 1] == 0)[0])
        self.assertEqual(int(ds.train_timestamps[row]), 9)

    def test_first_appearance_indices(self):
        records = [RawInteraction('b', 'y'), RawInteraction('a', 'x'), RawInteraction('b', 'x')]
        ds = build_index(records)
        self.assertEqual(ds.user_ids, ('b', 'a'))
        self.assertEqual(ds.item_ids, ('y', 'x'))
        np.testing.assert_array_equal(ds.train_pairs, [[0, 0], [1, 1], [0, 1]])

    def test_all_filtered(self):
        with self.assertRaises(EmptyDatasetError):
            build_index(self.records([2, 3]), min_user_records=5)


class SplitTests(SimpleTestCase):
    def test_random_split_ratio_and_partition(self):
        records = [RawInteraction('u', f'i{i}', 5.0, i) for i in range(10)]
        base = build_index(records)
        ds = split_random(base, 0.2, seed=7)
        self.assertEqual(ds.num_train, 8)
        self.assertEqual(len(ds.test[0]), 2)
        self.assertFalse(ds.test[0] & ds.per_user_positives[0])
        self.assertEqual(set(ds.per_user_positives[0]) | set(ds.test[0]), set(range(10)))

    def test_random_split_is_deterministic(self):
        a = toy_dataset(seed=3)
        b = toy_dataset(seed=3)
        np.testing.assert_array_equal(a.train_pairs, b.train_pairs)
        self.assertEqual(a.test, b.test)

    def test_random_split_keeps_one_train_item(self):
        base = build_index([RawInteraction('u', 'a'), RawInteraction('v', 'a'), RawInteraction('v', 'b')])
        ds = split_random(base, 0.9, seed=0)
        self.assertEqual(len(ds.per_user_positives[0]), 1)
        self.assertEqual(len(ds.per_user_positives[1]), 1)

    def test_bad_fraction(self):
        base = build_index([RawInteraction('u', 'a'), RawInteraction('u', 'b')])
        with self.assertRaises(ConfigurationError):
            split_random(base, 1.0, 0)
        with self.assertRaises(ConfigurationError):
            split_random(split_random(base, 0.5, 0), 0.5, 0)

    def test_leave_one_out(self):
        records = [RawInteraction('u', 'a', 5.0, 1), RawInteraction('u', 'b', 5.0, 2),
                   RawInteraction('u', 'c', 5.0, 3), RawInteraction('v', 'a', 5.0, 1)]
        ds = split_leave_one_out(build_index(records))
        self.assertEqual(ds.per_user_positives[0], frozenset([0]))
        self.assertEqual(ds.validation, {0: 1})
        self.assertEqual(ds.test, {0: frozenset([2])})
        # Too few records: everything stays in train, user is not evaluated
        self.assertEqual(ds.per_user_positives[1], frozenset([0]))
        self.assertNotIn(1, ds.test)

    def test_leave_one_out_tie_break_by_item_index(self):
        records = [RawInteraction('u', 'a', 5.0, 1), RawInteraction('u', 'c', 5.0, 5),
                   RawInteraction('u', 'b', 5.0, 5)]
        ds = split_leave_one_out(build_index(records))
        # c (index 1) and b (index 2) tie at t=5; the higher index is the latest
        self.assertEqual(ds.test, {0: frozenset([2])})
        self.assertEqual(ds.validation, {0: 1})

    def test_leave_one_out_needs_timestamps(self):
        with self.assertRaises(ConfigurationError):
            split_leave_one_out(build_index([RawInteraction('u', 'a')]))


class FalseNegativeTests(SimpleTestCase):
    def setUp(self):
        self.ds = toy_dataset(num_users=10, per_user=10, test_fraction=0.4)

    def test_sizes_and_subsets(self):
        fns = build_false_negative_set(self.ds, 0.5, 0.5, seed=1)
        for u, g in self.ds.test.items():
            self.assertEqual(len(fns.per_user[u]), int(np.floor(0.5 * len(g) + 0.5)))
            self.assertTrue(fns.per_user[u] <= g)
            self.assertTrue(fns.active_per_user[u] <= fns.per_user[u])
            self.assertFalse(fns.active_per_user[u] & self.ds.per_user_positives[u])

    def test_zero_fractions(self):
        self.assertEqual(build_false_negative_set(self.ds, 0.0, 1.0, seed=1).total_size, 0)
        fns = build_false_negative_set(self.ds, 0.5, 0.0, seed=1)
        self.assertGreater(fns.total_size, 0)
        self.assertEqual(fns.active_size, 0)

    def test_sigma_sweep_keeps_flipped_set(self):
        low = build_false_negative_set(self.ds, 0.5, 0.2, seed=4)
        high = build_false_negative_set(self.ds, 0.5, 1.0, seed=4)
        self.assertEqual(low.per_user, high.per_user)
        self.assertEqual(high.active_per_user, high.per_user)

    def test_needs_test_split(self):
        unsplit = build_index([RawInteraction('u', 'a')])
        with self.assertRaises(ConfigurationError):
            build_false_negative_set(unsplit, 0.5, 1.0, seed=0)


class PositiveIndexTests(SimpleTestCase):
    def test_draws_avoid_positives(self):
        ds = dataset_from_pairs(2, 6, [(0, 0), (0, 1), (0, 2), (1, 5)])
        index = PositiveIndex.from_dataset(ds)
        rng = np.random.default_rng(0)
        drawn = index.draw_negatives(np.zeros(500, dtype=np.int64), rng)
        self.assertTrue(set(drawn.tolist()) <= {3, 4, 5})
        np.testing.assert_array_equal(index.candidates_of(1), [0, 1, 2, 3, 4])
        self.assertTrue(index.contains([0, 1], [2, 5]).all())

    def test_user_without_candidates(self):
        ds = dataset_from_pairs(1, 2, [(0, 0), (0, 1)])
        with self.assertRaises(NoCandidateError):
            PositiveIndex.from_dataset(ds).draw_negatives([0], np.random.default_rng(0))


class SnapshotTests(SimpleTestCase):
    def test_round_trip_and_stable_hash(self):
        with tempfile.TemporaryDirectory() as tmp:
            raw = write_toy_ratings(Path(tmp) / 'u.data')
            ds = split_random(build_index(ingest(raw, positive_threshold=4)), 0.2, seed=5)
            first = save_snapshot(ds, Path(tmp) / 'a', 'abc', {'test_fraction': 0.2})
            second = save_snapshot(ds, Path(tmp) / 'b', 'abc', {'test_fraction': 0.2})
            meta_a = json.loads((first / 'meta.json').read_text())
            meta_b = json.loads((second / 'meta.json').read_text())
            self.assertEqual(meta_a['content_hash'], meta_b['content_hash'])
            self.assertEqual((first / 'train.tsv').read_text().splitlines()[0], 'user_index\titem_index')

            loaded = load_snapshot(first)
            np.testing.assert_array_equal(loaded.train_pairs, ds.train_pairs)
            self.assertEqual(loaded.test, ds.test)
            self.assertEqual(loaded.num_items, ds.num_items)
            self.assertIsNone(loaded.validation)

    def test_missing_snapshot(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MissingArtifactError):
                load_snapshot(Path(tmp) / 'absent')
