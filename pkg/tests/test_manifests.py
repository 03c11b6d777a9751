# -*- coding: utf-8 -*-
import numpy as np
import pytest

from errors import ConfigError, ManifestError
from manifests import (
    histogram_csv,
    load_experiment,
    load_manifest,
    load_snapshot,
    position_histogram,
    position_rows,
    positions_csv,
    save_snapshot,
)
from network import Residual, SoftmaxCrossEntropy
from tensor_core import write_tensor
from training import make_shift_network


def _classifier_manifest():
    return {
        "name": "toy",
        "seed": 3,
        "input": {"channels": 2, "height": 6, "width": 6},
        "layers": [
            {"type": "conv", "name": "stem", "in_channels": 2, "out_channels": 4, "kernel": [3, 3],
             "padding": [1, 1]},
            {"type": "residual", "name": "block", "layers": [
                {"type": "relu"},
                {"type": "acu", "name": "block.acu", "in_channels": 4, "out_channels": 4, "groups": 4,
                 "positions_init": {"kind": "grid", "kernel": [3, 3], "dilation": 2}},
            ]},
            {"type": "acu", "name": "shared", "in_channels": 4, "out_channels": 4, "groups": 2,
             "group_mode": "shared"},
            {"type": "gap"},
            {"type": "fc", "name": "fc", "in_channels": 4, "out_channels": 3},
            {"type": "softmax_ce"},
        ],
    }


class TestLoadManifest:
    def test_builds_network(self, write_json):
        net = load_manifest(write_json("net.json", _classifier_manifest()))
        assert net.name == "toy"
        assert net.input_shape == (2, 6, 6)
        assert isinstance(net.head, SoftmaxCrossEntropy)
        assert isinstance(net.layers[1], Residual)
        assert [m.name for m in net.acu_modules()] == ["block.acu", "shared"]

    def test_dilated_grid_initializer(self, write_json):
        net = load_manifest(write_json("net.json", _classifier_manifest()))
        offsets = net.acu_modules()[0].layer.positions.offsets
        assert offsets.shape == (4, 9, 2)
        assert [-2.0, -2.0] in offsets[0].tolist()

    def test_seed_controls_he_init(self, write_json):
        path = write_json("net.json", _classifier_manifest())
        a, b, c = load_manifest(path), load_manifest(path), load_manifest(path, seed=4)
        np.testing.assert_array_equal(a.registry["stem.weights"].value, b.registry["stem.weights"].value)
        assert not np.array_equal(a.registry["stem.weights"].value, c.registry["stem.weights"].value)

    def test_file_initializer(self, write_json, tmp_path):
        write_tensor(tmp_path / "w.tns", np.full((2, 1, 1, 2), 0.5))
        write_tensor(tmp_path / "p.tns", np.array([[[[0.0, 0.0], [0.5, -1.5]]]]))
        net = load_manifest(write_json("net.json", {"layers": [
            {"type": "acu", "name": "a", "in_channels": 2, "out_channels": 2, "groups": 2, "synapses": 2,
             "group_mode": "shared", "weights_init": {"kind": "file", "path": "w.tns"},
             "positions_init": {"kind": "file", "path": "p.tns"}},
        ]}))
        layer = net.acu_modules()[0].layer
        np.testing.assert_array_equal(layer.positions.offsets[0, 1], [0.5, -1.5])
        assert np.all(layer.weights == 0.5)

    def test_missing_tensor_names_layer(self, write_json):
        path = write_json("net.json", {"layers": [
            {"type": "acu", "name": "acu7", "in_channels": 1, "out_channels": 1,
             "weights_init": {"kind": "file", "path": "nope.tns"}},
        ]})
        with pytest.raises(ManifestError, match="acu7"):
            load_manifest(path)

    def test_shape_mismatch_reports_dims(self, write_json, tmp_path):
        write_tensor(tmp_path / "w.tns", np.zeros((1, 1, 1, 4)))
        path = write_json("net.json", {"layers": [
            {"type": "acu", "name": "acu0", "in_channels": 1, "out_channels": 1,
             "weights_init": {"kind": "file", "path": "w.tns"}},
        ]})
        with pytest.raises(ManifestError, match=r"\(1, 1, 1, 9\).*\(1, 1, 1, 4\)"):
            load_manifest(path)

    def test_synapse_count_must_match_grid(self, write_json):
        path = write_json("net.json", {"layers": [
            {"type": "acu", "in_channels": 1, "out_channels": 1, "synapses": 4},
        ]})
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_malformed_manifest(self, write_json):
        with pytest.raises(ManifestError):
            load_manifest(write_json("net.json", {"layers": [{"type": "pool"}]}))

    def test_bad_geometry(self, write_json):
        path = write_json("net.json", {"layers": [
            {"type": "acu", "in_channels": 6, "out_channels": 4, "groups": 4},
        ]})
        with pytest.raises(ManifestError):
            load_manifest(path)


class TestSnapshot:
    def test_round_trip_is_bit_exact(self, write_json, tmp_path, rng):
        net = load_manifest(write_json("net.json", _classifier_manifest()))
        for p in net.registry.values():
            if p.kind == "position":
                p.value[...] += np.where(p.mask, rng.uniform(-1, 1, size=p.value.shape), 0.0)
        save_snapshot(net, tmp_path / "snap")
        back = load_snapshot(tmp_path / "snap")
        assert list(back.registry) == list(net.registry)
        for name, p in net.registry.items():
            np.testing.assert_array_equal(back.registry[name].value, p.value, err_msg=name)
        x = rng.normal(size=(2, 2, 6, 6))
        np.testing.assert_array_equal(back.forward(x), net.forward(x))
        assert isinstance(back.head, SoftmaxCrossEntropy)

    def test_snapshot_files(self, write_json, tmp_path):
        net = load_manifest(write_json("net.json", _classifier_manifest()))
        out = save_snapshot(net, tmp_path / "snap")
        assert (out / "manifest.json").is_file()
        assert (out / "shared.positions.tns").is_file()
        assert (out / "fc.bias.tns").is_file()

    def test_free_origin_survives(self, tmp_path):
        net = make_shift_network(size=8)
        net.registry["acu0.positions"].value[...] = [[[1.25, -0.5]]]
        save_snapshot(net, tmp_path / "snap")
        back = load_snapshot(tmp_path / "snap")
        layer = back.acu_modules()[0].layer
        assert not layer.positions.pin_origin
        np.testing.assert_array_equal(layer.positions.offsets, [[[1.25, -0.5]]])


class TestPositionExports:
    def test_row_count_is_groups_times_synapses(self, write_json):
        net = load_manifest(write_json("net.json", _classifier_manifest()))
        rows = position_rows(net)
        assert len(rows) == 4 * 9 + 2 * 9
        assert rows[0] == ("block.acu", 0, 0, 0.0, 0.0)
        shared = [r for r in rows if r[0] == "shared"]
        assert [r[3:] for r in shared if r[1] == 0] == [r[3:] for r in shared if r[1] == 1]

    def test_csv(self):
        text = positions_csv([("acu0", 0, 1, 0.5, -1.25)])
        assert text == "layer,group,synapse,alpha,beta\nacu0,0,1,0.5,-1.25\n"

    def test_histogram_counts(self):
        rows = [("a", 0, 0, 0.0, 0.0), ("a", 0, 1, 1.0, -1.0), ("a", 0, 2, 1.2, -0.9), ("a", 0, 3, -0.4, 0.3)]
        edges, counts = position_histogram(rows, bin_width=1.0)
        assert counts.shape == (3, 3)
        assert counts.sum() == 4
        assert counts[1, 1] == 2  # centro: (0, 0) y (-0.4, 0.3)
        assert counts[2, 0] == 2
        lines = histogram_csv(edges, counts).splitlines()
        assert lines[0] == "alpha\\beta,-1,0,1"
        assert lines[2] == "0,0,2,0"

    def test_histogram_bin_width_validated(self):
        with pytest.raises(ConfigError):
            position_histogram([("a", 0, 0, 0.0, 0.0)], bin_width=0.0)


class TestExperiment:
    def test_shift_experiment(self, shift_config):
        net, data, cfg = load_experiment(shift_config)
        assert cfg.total_iters == 40
        assert data.inputs.shape == (8, 1, 8, 8)
        assert net.input_shape == (1, 8, 8)

    def test_threads_reach_the_shift_network(self, shift_config):
        net, _, _ = load_experiment(shift_config, threads=3)
        assert net.acu_modules()[0].threads == 3

    def test_seed_override(self, shift_config):
        _, a, cfg = load_experiment(shift_config, seed=9)
        _, b, _ = load_experiment(shift_config, seed=10)
        assert cfg.seed == 9
        assert not np.array_equal(a.inputs, b.inputs)

    def test_tensor_task_needs_manifest(self, write_json, tmp_path):
        write_tensor(tmp_path / "x.tns", np.zeros((4, 1, 5, 5)))
        write_tensor(tmp_path / "y.tns", np.zeros((4, 1, 5, 5)))
        path = write_json("exp.json", {"task": {"kind": "tensors", "inputs": "x.tns", "targets": "y.tns"}})
        with pytest.raises(ConfigError):
            load_experiment(path)

    def test_tensor_task_with_labels(self, write_json, tmp_path):
        write_tensor(tmp_path / "x.tns", np.ones((4, 2, 6, 6)))
        write_tensor(tmp_path / "y.tns", np.array([0.0, 1.0, 2.0, 1.0]).reshape(4, 1, 1, 1))
        write_json("net.json", _classifier_manifest())
        path = write_json("exp.json", {"manifest": "net.json",
                                       "task": {"kind": "tensors", "inputs": "x.tns", "targets": "y.tns"}})
        net, data, _ = load_experiment(path)
        assert data.targets.shape == (4,)
        assert np.isfinite(net.loss(data.inputs, data.targets))

    def test_invalid_config(self, write_json):
        with pytest.raises(ConfigError):
            load_experiment(write_json("exp.json", {"train": {"base_lr": -1}}))
