import os
import sys
import tempfile
import unittest

import numpy as np


ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SCRIPTS_DIR = os.path.join(ROOT_DIR, "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

import flow_farneback as ff  # noqa: E402
import grid_store  # noqa: E402
from errors import ConfigError, NumericError, RangeError, ShapeError  # noqa: E402


def _bump(shape, center, sigma: float, amplitude: float = 2.0, base: float = 20.0) -> np.ndarray:
    i, j = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return base + amplitude * np.exp(-((i - center[0]) ** 2 + (j - center[1]) ** 2) / (2.0 * sigma**2))


def _textured(frame: np.ndarray) -> np.ndarray:
    gi, gj = np.gradient(frame)
    magnitude = np.hypot(gi, gj)
    return magnitude >= 0.1 * magnitude.max()


def _waves(shape, shift=(0.0, 0.0)) -> np.ndarray:
    i, j = np.meshgrid(np.arange(shape[0], dtype=float), np.arange(shape[1], dtype=float), indexing="ij")
    i, j = i - shift[0], j - shift[1]
    k1, k2 = 2.0 * np.pi / 13.0, 2.0 * np.pi / 17.0
    return 20.0 + np.sin(k1 * i + k2 * j + 0.3) + 0.7 * np.sin(k2 * i - k1 * j + 1.1)


class PolynomialExpansionTests(unittest.TestCase):
    def test_constant_ramp_and_paraboloid_fit_exactly(self) -> None:
        i, j = np.meshgrid(np.arange(16, dtype=float), np.arange(16, dtype=float), indexing="ij")

        const = ff.polynomial_expansion(np.full((16, 16), 5.0))
        np.testing.assert_allclose(const.A, 0.0, atol=1e-8)
        np.testing.assert_allclose(const.b, 0.0, atol=1e-8)
        np.testing.assert_allclose(const.c, 5.0, atol=1e-8)

        ramp = ff.polynomial_expansion(2.0 * i)
        np.testing.assert_allclose(ramp.b[..., 0], 2.0, atol=1e-7)
        np.testing.assert_allclose(ramp.b[..., 1], 0.0, atol=1e-7)
        np.testing.assert_allclose(ramp.A, 0.0, atol=1e-7)
        np.testing.assert_allclose(ramp.c, 2.0 * i, atol=1e-6)

        parab = ff.polynomial_expansion(i**2)
        np.testing.assert_allclose(parab.A[..., 0, 0], 1.0, atol=1e-6)
        np.testing.assert_allclose(parab.A[..., 0, 1], 0.0, atol=1e-6)
        np.testing.assert_allclose(parab.A[..., 1, 1], 0.0, atol=1e-6)

    def test_general_quadratic_reconstructs_and_is_symmetric(self) -> None:
        i, j = np.meshgrid(np.arange(14, dtype=float), np.arange(12, dtype=float), indexing="ij")
        frame = 2.0 + 0.5 * i - 0.3 * j + 0.1 * i**2 + 0.05 * j**2 - 0.02 * i * j
        poly = ff.polynomial_expansion(frame)
        self.assertTrue(np.array_equal(poly.A[..., 0, 1], poly.A[..., 1, 0]))
        np.testing.assert_allclose(poly.A[..., 0, 1], -0.01, atol=1e-6)
        np.testing.assert_allclose(poly.reconstruct(0.0, 0.0), frame, atol=1e-6)
        np.testing.assert_allclose(poly.reconstruct(1.0, -2.0)[2:10, 3:9], frame[3:11, 1:7], atol=1e-6)

    def test_non_finite_frames_are_rejected(self) -> None:
        frame = np.zeros((6, 6))
        frame[2, 2] = np.nan
        with self.assertRaises(NumericError):
            ff.polynomial_expansion(frame)


class FlowEstimationTests(unittest.TestCase):
    def test_identical_frames_give_zero_flow(self) -> None:
        frame = _bump((24, 24), (11, 12), 4.0)
        pair = ff.estimate_flow_pair(frame, frame)
        pyramidal = ff.estimate_flow_pyramidal(frame, frame)
        self.assertLessEqual(float(pair.magnitude().max()), 1e-6)
        self.assertLessEqual(float(pyramidal.magnitude().max()), 1e-6)

    def test_one_cell_shift_of_a_bump(self) -> None:
        f1 = _bump((32, 32), (14, 15), 4.0)
        f2 = _bump((32, 32), (15, 15), 4.0)
        mask = _textured(f1)
        flow = ff.estimate_flow_pair(f1, f2)
        error = np.hypot(flow.u[mask] - 1.0, flow.v[mask])
        self.assertLessEqual(float(error.mean()), 0.25)

    def test_subpixel_shift_of_a_sinusoid(self) -> None:
        f1 = _waves((32, 32))
        f2 = _waves((32, 32), shift=(0.5, 0.5))
        flow = ff.estimate_flow_pair(f1, f2)
        interior = (slice(6, 26), slice(6, 26))
        self.assertLessEqual(abs(float(flow.u[interior].mean()) - 0.5), 0.15)
        self.assertLessEqual(abs(float(flow.v[interior].mean()) - 0.5), 0.15)

    def test_pyramid_recovers_a_six_cell_shift(self) -> None:
        f1 = _bump((64, 64), (26, 32), 6.0)
        f2 = _bump((64, 64), (32, 32), 6.0)
        mask = _textured(f1)
        flow = ff.estimate_flow_pyramidal(f1, f2, ff.FlowParams(pyramid_levels=4))
        error = np.hypot(flow.u[mask] - 6.0, flow.v[mask])
        self.assertLessEqual(float(error.mean()), 1.0)

    def test_pyramid_matches_single_level_on_a_one_cell_shift(self) -> None:
        f1 = _bump((32, 32), (14, 15), 4.0)
        f2 = _bump((32, 32), (15, 15), 4.0)
        mask = _textured(f1)
        flow = ff.estimate_flow_pyramidal(f1, f2)
        error = np.hypot(flow.u[mask] - 1.0, flow.v[mask])
        self.assertLessEqual(float(error.mean()), 0.25)

    def test_refinement_skips_levels_smaller_than_the_fit_window(self) -> None:
        params = ff.FlowParams()
        self.assertEqual(ff.min_fit_size(params), 11)
        self.assertEqual(ff.fit_start_level(ff.build_pyramid(np.zeros((8, 8)), 4), params), 0)
        self.assertEqual(ff.fit_start_level(ff.build_pyramid(np.zeros((32, 32)), 4), params), 1)
        self.assertEqual(ff.fit_start_level(ff.build_pyramid(np.zeros((64, 64)), 4), params), 2)
        self.assertEqual(ff.fit_start_level(ff.build_pyramid(np.zeros((8, 8)), 4), ff.FlowParams(window_radius=1)), 1)

    def test_pipeline_grid_flow_stays_bounded_and_near_the_true_shift(self) -> None:
        frames = grid_store.generate_synthetic(0, 240, 8, 8, "advecting_wave").data
        params = ff.FlowParams()
        peaks, errors = [], []
        for t in range(frames.shape[0] - 1):
            flow = ff.estimate_flow_pyramidal(frames[t], frames[t + 1], params)
            peaks.append(float(flow.magnitude().max()))
            u, v = flow.mean()
            errors.append(float(np.hypot(u - 1.0, v)))
        self.assertLessEqual(max(peaks), params.window_radius + 1e-9)
        self.assertLessEqual(float(np.median(errors)), 0.4)

    def test_flow_is_roughly_antisymmetric(self) -> None:
        f1 = _bump((32, 32), (14, 15), 4.0)
        f2 = _bump((32, 32), (15, 16), 4.0)
        mask = _textured(f1) & _textured(f2)
        forward = ff.estimate_flow_pair(f1, f2)
        backward = ff.estimate_flow_pair(f2, f1)
        discrepancy = np.hypot(forward.u + backward.u, forward.v + backward.v)
        self.assertLessEqual(float(discrepancy[mask].mean()), 0.3)

    def test_larger_smoothness_never_increases_total_variation(self) -> None:
        rng = np.random.default_rng(5)
        f1 = _waves((24, 24)) + rng.normal(0.0, 0.05, size=(24, 24))
        f2 = _waves((24, 24), shift=(1.0, 0.0)) + rng.normal(0.0, 0.05, size=(24, 24))
        tv = [
            ff.estimate_flow_pair(f1, f2, params=ff.FlowParams(smoothness_lambda=lam)).total_variation()
            for lam in (0.0, 0.15, 0.5)
        ]
        self.assertLessEqual(tv[1], tv[0] + 1e-9)
        self.assertLessEqual(tv[2], tv[1] + 1e-9)

    def test_shape_mismatch_is_rejected(self) -> None:
        with self.assertRaises(ShapeError):
            ff.estimate_flow_pair(np.zeros((4, 4)), np.zeros((4, 5)))
        with self.assertRaises(ShapeError):
            ff.estimate_flow_pair(np.zeros((4, 4)), np.zeros((4, 4)), init=ff.FlowField.zeros((3, 3)))


class PyramidTests(unittest.TestCase):
    def test_sizes_halve_and_clamp(self) -> None:
        sizes = [level.shape for level in ff.build_pyramid(np.zeros((16, 16)), 4)]
        self.assertEqual(sizes, [(16, 16), (8, 8), (4, 4), (2, 2)])
        self.assertEqual(len(ff.build_pyramid(np.zeros((5, 5)), 4)), 2)
        self.assertEqual([lvl.shape for lvl in ff.build_pyramid(np.zeros((9, 20)), 4)], [(9, 20), (4, 10), (2, 5)])
        with self.assertRaises(RangeError):
            ff.build_pyramid(np.zeros((4, 4)), 0)

    def test_constant_frame_stays_constant(self) -> None:
        for level in ff.build_pyramid(np.full((12, 12), 7.5), 3):
            np.testing.assert_allclose(level, 7.5, atol=1e-12)


class FlowSequenceTests(unittest.TestCase):
    def test_last_flow_duplicates_the_final_pair(self) -> None:
        frames = grid_store.generate_synthetic(2, 5, 8, 8, "advecting_wave").data
        seq = ff.estimate_flow_sequence(frames, ff.FlowParams(pyramid_levels=2))
        self.assertEqual(len(seq), 5)
        self.assertTrue(np.array_equal(seq.flows[4].u, seq.flows[3].u))
        self.assertTrue(np.array_equal(seq.flows[4].v, seq.flows[3].v))
        self.assertEqual(seq.alpha_x.shape, (5, 8, 8))
        self.assertEqual(seq.flow_data.shape, (5, 8, 8, 2))

        two = ff.estimate_flow_sequence(frames[:2])
        self.assertEqual(len(two), 2)
        self.assertTrue(ff.flow_sequences_close(ff.FlowSequence(two.flows[:1]), ff.FlowSequence(two.flows[1:])))

    def test_constant_velocity_series_has_stationary_flow(self) -> None:
        frames = grid_store.generate_synthetic(9, 5, 32, 32, "advecting_wave", shift=(1.0, 0.0)).data
        seq = ff.estimate_flow_sequence(frames, ff.FlowParams(pyramid_levels=2))
        interior = (slice(6, 26), slice(6, 26))
        means = np.array([[f.u[interior].mean(), f.v[interior].mean()] for f in seq.flows])
        spread = np.max(np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1))
        self.assertLessEqual(float(spread), 0.2)

    def test_single_frame_is_rejected(self) -> None:
        with self.assertRaises(RangeError):
            ff.estimate_flow_sequence(np.zeros((1, 4, 4)))

    def test_flow_params_validate(self) -> None:
        with self.assertRaises(ConfigError):
            ff.FlowParams(pyramid_levels=0)
        with self.assertRaises(ConfigError):
            ff.FlowParams(smoothness_lambda=-1.0)
        params = ff.FlowParams.from_config({"window_radius": "3", "gaussian_sigma": 1})
        self.assertEqual((params.window_radius, params.gaussian_sigma), (3, 1.0))
        self.assertEqual(params.to_dict()["iterations"], 3)


class FlowDumpTests(unittest.TestCase):
    def test_dumps_write_csv_and_scaled_pgm(self) -> None:
        u = np.array([[0.0, 3.0], [0.0, 0.0]])
        v = np.array([[0.0, 4.0], [1.0, 0.0]])
        seq = ff.FlowSequence((ff.FlowField(u, v), ff.FlowField(u, v)))
        with tempfile.TemporaryDirectory() as tmp_dir:
            written = ff.write_flow_dumps(seq, tmp_dir)
            self.assertEqual(len(written), 6)
            np.testing.assert_allclose(np.loadtxt(os.path.join(tmp_dir, "flow_u_0.csv"), delimiter=","), u)
            np.testing.assert_allclose(np.loadtxt(os.path.join(tmp_dir, "flow_v_1.csv"), delimiter=","), v)
            image = ff.read_pgm(os.path.join(tmp_dir, "flow_mag_0.pgm"))
        np.testing.assert_array_equal(image, [[0, 255], [51, 0]])


if __name__ == "__main__":
    unittest.main()
