import json
import os
import sys
import tempfile
import unittest
from unittest import mock


ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SCRIPTS_DIR = os.path.join(ROOT_DIR, "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

import utils  # noqa: E402


class UtilsTests(unittest.TestCase):
    def test_deep_merge_recursively_merges_nested_dicts(self) -> None:
        base = {"a": 1, "b": {"c": 2, "d": 3}, "e": {"f": 4}}
        override = {"b": {"d": 30, "x": 99}, "e": 5}

        merged = utils._deep_merge(base, override)

        self.assertEqual(merged, {"a": 1, "b": {"c": 2, "d": 30, "x": 99}, "e": 5})
        self.assertEqual(base, {"a": 1, "b": {"c": 2, "d": 3}, "e": {"f": 4}})

    def test_load_config_layers_local_and_explicit_files(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            base = os.path.join(tmp_dir, "config.yaml")
            local = os.path.join(tmp_dir, "config.local.yaml")
            extra = os.path.join(tmp_dir, "extra.yaml")
            with open(base, "w", encoding="utf-8") as f:
                f.write("sampling:\n  M: 30\n  L: 30\ntrain:\n  epochs: 220\n")
            with open(local, "w", encoding="utf-8") as f:
                f.write("sampling:\n  L: 15\n")
            with open(extra, "w", encoding="utf-8") as f:
                f.write("train:\n  epochs: 5\n")

            with mock.patch.object(utils, "CONFIG_PATH", base), mock.patch.object(utils, "CONFIG_LOCAL_PATH", local):
                config = utils.load_config(extra)

        self.assertEqual(config["sampling"], {"M": 30, "L": 15})
        self.assertEqual(config["train"], {"epochs": 5})

    def test_load_config_rejects_missing_explicit_file(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            with mock.patch.object(utils, "CONFIG_PATH", os.path.join(tmp_dir, "none.yaml")):
                with self.assertRaises(FileNotFoundError):
                    utils.load_config(os.path.join(tmp_dir, "missing.yaml"))

    def test_config_section_rejects_non_mapping(self) -> None:
        with self.assertRaises(ValueError):
            utils.config_section({"model": [1, 2]}, "model")
        self.assertEqual(utils.config_section({}, "model"), {})

    def test_resolve_seed_prefers_environment(self) -> None:
        with mock.patch.dict(os.environ, {utils.SEED_ENV_VAR: "11"}):
            self.assertEqual(utils.resolve_seed(3), 11)
        with mock.patch.dict(os.environ, {utils.SEED_ENV_VAR: ""}):
            self.assertEqual(utils.resolve_seed(3), 3)
            self.assertEqual(utils.resolve_seed(None, default=9), 9)
        with mock.patch.dict(os.environ, {utils.SEED_ENV_VAR: "abc"}):
            with self.assertRaises(ValueError):
                utils.resolve_seed(1)

    def test_write_json_and_csv_are_readable(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            json_path = os.path.join(tmp_dir, "run.json")
            csv_path = os.path.join(tmp_dir, "loss.csv")
            utils.write_json(json_path, {"b": 1, "a": [1, 2]})
            utils.write_csv(csv_path, ["epoch", "loss"], [[1, "0.5"], [2, "0.25"]])

            with open(json_path, "r", encoding="utf-8") as f:
                self.assertEqual(json.load(f), {"a": [1, 2], "b": 1})
            rows = utils.read_csv(csv_path)
            self.assertFalse(os.path.exists(f"{csv_path}.tmp"))

        self.assertEqual(rows, [{"epoch": "1", "loss": "0.5"}, {"epoch": "2", "loss": "0.25"}])

    def test_csv_metadata_lines_sit_above_the_header(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "report.csv")
            meta = {"optimizer": "adam", "learning_rate": 0.001, "normalize": False, "kernel_sizes": (1, 3)}
            utils.write_csv(path, ["rmse"], [["0.5"]], meta=meta)
            with open(path, "r", encoding="utf-8") as f:
                first = f.readline()
            stamped = utils.read_csv_meta(path)
            rows = utils.read_csv(path)
            plain = os.path.join(tmp_dir, "plain.csv")
            utils.write_csv(plain, ["rmse"], [["0.5"]])
            self.assertEqual(utils.read_csv_meta(plain), {})

        self.assertEqual(first, "# optimizer: adam\n")
        self.assertEqual(
            stamped, {"optimizer": "adam", "learning_rate": "0.001", "normalize": "false", "kernel_sizes": "[1, 3]"}
        )
        self.assertEqual(rows, [{"rmse": "0.5"}])

    def test_day_of_year_uses_unix_epoch_days(self) -> None:
        self.assertEqual(utils.day_of_year(0.0), 1)
        self.assertEqual(utils.day_of_year(19358.0), 1)  # 2023-01-01
        self.assertEqual(utils.day_of_year(19358.0 + 79), 80)

    def test_package_versions_lists_numeric_stack(self) -> None:
        versions = utils.package_versions()
        for name in ("python", "numpy", "scipy", "PyYAML"):
            self.assertIn(name, versions)


if __name__ == "__main__":
    unittest.main()
