import json
import os
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from neuralcore import G_WIDTHS, Mlp, forward
from simulate import PathSet, SdeModel, simulate_paths
from storage import (
    ArtifactStore,
    atomic_write_text,
    format_value,
    load_checkpoint,
    read_observations_csv,
    read_paths_csv,
    to_jsonable,
)


class StorageTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.dir = self._tmp.name
        self.store = ArtifactStore(os.path.join(self.dir, "out"))

    def write(self, name, text):
        path = os.path.join(self.dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path


class TestWriting(StorageTestCase):
    def test_atomic_write_leaves_no_temporaries(self):
        target = os.path.join(self.dir, "nested", "report.txt")
        atomic_write_text(target, "first")
        atomic_write_text(target, "second")
        with open(target, encoding="utf-8") as f:
            self.assertEqual(f.read(), "second")
        self.assertEqual(os.listdir(os.path.dirname(target)), ["report.txt"])

    def test_store_requires_directory(self):
        with self.assertRaises(ValueError):
            ArtifactStore("")

    def test_json_is_sorted_and_plain(self):
        path = self.store.write_json("report.json", {"b": np.float64(0.5), "a": np.arange(3), "c": np.bool_(True)})
        with open(path, encoding="utf-8") as f:
            text = f.read()
        self.assertEqual(json.loads(text), {"a": [0, 1, 2], "b": 0.5, "c": True})
        self.assertLess(text.index('"a"'), text.index('"b"'))
        self.assertEqual(self.store.written, [path])

    def test_format_value_is_lossless(self):
        value = 0.1 + 0.2
        self.assertEqual(float(format_value(value)), value)
        self.assertEqual(format_value(np.int64(3)), "3")
        self.assertEqual(format_value(True), "1")
        self.assertEqual(to_jsonable((np.int32(1), {"k": np.float32(2.0)})), [1, {"k": 2.0}])


class TestPaths(StorageTestCase):
    def test_written_paths_read_back_exactly(self):
        model = SdeModel.from_expressions("1-x", "0.31*x", 1.5)
        pathset = simulate_paths(model, 1.0, 40, 3, seed=2, block_size=10, threads=1)
        path = self.store.write_paths(pathset)
        with open(path, encoding="utf-8") as f:
            self.assertEqual(f.readline().strip(), "path,t,x")
        loaded = read_paths_csv(path, 10)
        npt.assert_array_equal(loaded.paths, pathset.paths)
        npt.assert_array_equal(loaded.grid, pathset.grid)

    def test_rejects_bad_files(self):
        cases = {
            "header.csv": "id,t,x\n0,0,1\n",
            "row.csv": "path,t,x\n0,0,abc\n",
            "grid.csv": "path,t,x\n0,0,1\n0,1,1\n1,0,1\n1,2,1\n",
            "empty.csv": "",
        }
        for name, text in cases.items():
            with self.subTest(name=name):
                with self.assertRaises(ValueError):
                    read_paths_csv(self.write(name, text), 2)
        with self.assertRaises(ValueError):
            read_paths_csv(os.path.join(self.dir, "missing.csv"), 2)

    def test_block_size_is_checked(self):
        path = self.store.write_paths(PathSet(np.linspace(0, 1, 6), np.zeros((1, 6)), 3))
        with self.assertRaises(ValueError):
            read_paths_csv(path, 4)


class TestObservations(StorageTestCase):
    def test_header_is_optional(self):
        npt.assert_array_equal(read_observations_csv(self.write("a.csv", "x_next\n1.5\n-0.25\n")), [1.5, -0.25])
        npt.assert_array_equal(read_observations_csv(self.write("b.csv", "1.5\n\n2\n")), [1.5, 2.0])

    def test_non_numeric_rows(self):
        with self.assertRaises(ValueError):
            read_observations_csv(self.write("c.csv", "x_next\n1.0\noops\n"))


class TestCheckpoints(StorageTestCase):
    def test_round_trip(self):
        net = Mlp.create(G_WIDTHS, "softplus", 4)
        loaded = load_checkpoint(self.store.write_checkpoint("diffusion.json", net))
        x = np.linspace(-2, 2, 9)
        npt.assert_array_equal(forward(loaded, x), forward(net, x))

    def test_malformed(self):
        with self.assertRaises(ValueError):
            load_checkpoint(self.write("bad.json", "{not json"))
        with self.assertRaises(ValueError):
            load_checkpoint(self.write("partial.json", '{"widths": [1, 4, 1], "head": "linear"}'))


if __name__ == "__main__":
    unittest.main()
