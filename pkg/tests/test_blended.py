"""Tests for the slow models, decomposition machinery, and emergent field."""

from __future__ import annotations

import numpy as np
import pytest

from blendnet.blended import (
    as_network_system,
    blended_output,
    blended_rank_deficient,
    blended_state,
    build_decomposition,
    contraction_estimate,
    emergent_node_funnel,
)
from blendnet.errors import (
    DimensionMismatch,
    NoBracket,
    NonFiniteJacobian,
    NotMonotone,
)
from blendnet.graph import build_graph, generate_graph
from blendnet.linalg import kernel_basis
from blendnet.netsim import (
    CoupledField,
    FunnelSpec,
    SolverOptions,
    VectorField,
    assemble_rank_deficient,
    integrate,
)


def counting_fields(n):
    out = [VectorField(dim=1, eval=lambda t, x: -x + 1.0)]
    out += [VectorField(dim=1, eval=lambda t, x: np.ones_like(x))] * (n - 1)
    return out


def const_scalar(v):
    return VectorField(dim=1, eval=lambda t, x: np.full_like(x, v))


def random_psd(rng, n, rank):
    if rank == 0:
        return np.zeros((n, n))
    g = rng.normal(size=(n, rank))
    return g @ g.T


class TestBlendedState:
    def test_counting_average(self):
        model = blended_state(counting_fields(4))
        for s in (-2.0, 0.0, 1.0, 7.5):
            got = model.reduced_field.eval(0.0, np.array([s]))
            assert got[0] == pytest.approx(-s / 4.0 + 1.0, abs=1e-12)

    def test_identical_agents(self):
        f = VectorField(dim=2, eval=lambda t, x: np.array([x[1], -np.sin(x[0])]))
        model = blended_state([f] * 5)
        rng = np.random.default_rng(0)
        for _ in range(10):
            s = rng.normal(size=2)
            np.testing.assert_allclose(
                model.reduced_field.eval(0.0, s), f.eval(0.0, s), atol=1e-12
            )

    def test_opposite_fields_cancel(self):
        fields = [VectorField(dim=1, eval=lambda t, x: x),
                  VectorField(dim=1, eval=lambda t, x: -x)]
        model = blended_state(fields)
        assert model.reduced_field.eval(0.0, np.array([3.3]))[0] == 0.0

    def test_reconstruct_and_project(self):
        model = blended_state(counting_fields(3))
        s = np.array([2.5])
        stacked = model.reconstruct(s)
        np.testing.assert_allclose(stacked, [2.5, 2.5, 2.5])
        np.testing.assert_allclose(model.project(stacked), s)

    def test_integrates_to_analytic_solution(self):
        model = blended_state(counting_fields(4))
        sys = as_network_system(model)
        traj = integrate(sys, np.zeros(1), 0.0, 4.0, SolverOptions(h=1e-3))
        expected = 4.0 * (1.0 - np.exp(-1.0))
        assert abs(float(traj.states[-1, 0]) - expected) < 1e-6


class TestBlendedOutput:
    def test_degenerate_z_matches_blended_state(self):
        rng = np.random.default_rng(1)
        funcs = [lambda t, y: -y + 1.0,
                 lambda t, y: np.sin(y),
                 lambda t, y: y ** 2]
        z_fields = [CoupledField(dim=0, eval=lambda t, z, y: z)] * 3
        y_fields = [
            CoupledField(dim=1, eval=(lambda f: lambda t, y, z: f(t, y))(f))
            for f in funcs
        ]
        plain = [VectorField(dim=1, eval=(lambda f: lambda t, x: f(t, x))(f))
                 for f in funcs]
        out_model = blended_output(z_fields, y_fields)
        state_model = blended_state(plain)
        assert out_model.reduced_field.dim == 1
        for _ in range(20):
            s = rng.normal(size=1)
            np.testing.assert_allclose(
                out_model.reduced_field.eval(0.0, s),
                state_model.reduced_field.eval(0.0, s),
                atol=1e-12,
            )

    def test_linear_fields_match_hand_average(self):
        a = [0.5, -1.0]
        b = [2.0, 1.0]
        c = [-0.3, 0.4]
        d = [1.5, -2.5]
        z_fields = [
            CoupledField(dim=1, eval=(lambda ai, bi: lambda t, z, y: ai * z + bi * y)(ai, bi))
            for ai, bi in zip(a, b)
        ]
        y_fields = [
            CoupledField(dim=1, eval=(lambda ci, di: lambda t, y, z: ci * y + di * z)(ci, di))
            for ci, di in zip(c, d)
        ]
        model = blended_output(z_fields, y_fields)
        assert model.reduced_field.dim == 3
        rng = np.random.default_rng(2)
        for _ in range(10):
            z1, z2, s = rng.normal(size=3)
            got = model.reduced_field.eval(0.0, np.array([z1, z2, s]))
            expected = [
                a[0] * z1 + b[0] * s,
                a[1] * z2 + b[1] * s,
                0.5 * ((c[0] * s + d[0] * z1) + (c[1] * s + d[1] * z2)),
            ]
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_reconstruct_layout_and_project(self):
        z_fields = [CoupledField(dim=1, eval=lambda t, z, y: z)] * 2
        y_fields = [CoupledField(dim=1, eval=lambda t, y, z: y)] * 2
        model = blended_output(z_fields, y_fields)
        slow = np.array([10.0, 20.0, 5.0])
        stacked = model.reconstruct(slow)
        np.testing.assert_allclose(stacked, [10.0, 5.0, 20.0, 5.0])
        np.testing.assert_allclose(model.project(stacked), slow)

    def test_field_count_mismatch(self):
        z_fields = [CoupledField(dim=1, eval=lambda t, z, y: z)]
        y_fields = [CoupledField(dim=1, eval=lambda t, y, z: y)] * 2
        with pytest.raises(DimensionMismatch):
            blended_output(z_fields, y_fields)


class TestBuildDecomposition:
    def test_all_identity_blocks(self):
        g = generate_graph("random_connected", 3, seed=4)
        dec = build_decomposition(g, [np.eye(2)] * 3)
        assert dec.p_s == 2
        assert dec.p_bar == 6
        v1 = dec.v_block(0)
        for i in (1, 2):
            np.testing.assert_allclose(dec.v_block(i), v1, atol=1e-9)
        # orthonormal V with equal blocks forces MᵀM = I/N
        np.testing.assert_allclose(dec.m.T @ dec.m, np.eye(2) / 3.0, atol=1e-9)

    def test_trivial_common_image(self):
        g = build_graph(2, [(1, 2)])
        b1 = np.diag([1.0, 0.0])
        b2 = np.diag([0.0, 1.0])
        dec = build_decomposition(g, [b1, b2])
        assert dec.p_s == 0
        assert dec.v.shape == (2, 0)
        assert dec.v_bar.shape == (2, 2)
        assert np.linalg.eigvalsh(dec.q)[0] > 0

    def test_mixed_ranks_common_direction(self):
        g = build_graph(2, [(1, 2)])
        dec = build_decomposition(g, [np.diag([1.0, 0.0]), np.eye(2)])
        assert dec.p_s == 1
        # shared image is the first coordinate axis
        m = dec.m / np.linalg.norm(dec.m)
        assert abs(m[1, 0]) < 1e-9
        assert abs(abs(m[0, 0]) - 1.0) < 1e-9

    def test_random_instances_properties(self):
        rng = np.random.default_rng(5)
        kinds = ["complete", "ring", "path"]
        for trial in range(30):
            n_agents = int(rng.integers(2, 5))
            n = int(rng.integers(1, 4))
            kind = kinds[trial % 3]
            if kind == "ring" and n_agents < 3:
                kind = "path"
            g = generate_graph(kind, n_agents)
            ranks = [int(rng.integers(0, n + 1)) for _ in range(n_agents)]
            bs = [random_psd(rng, n, r) for r in ranks]
            dec = build_decomposition(g, bs)
            p_list = [s.rank for s in dec.splits]
            assert dec.p_s <= min(p_list)
            assert dec.p_bar == sum(p_list)
            if dec.p_bar:
                basis = np.hstack([dec.v, dec.v_bar])
                np.testing.assert_allclose(
                    basis.T @ basis, np.eye(dec.p_bar), atol=1e-9
                )
            if dec.q.shape[0]:
                assert np.linalg.eigvalsh(dec.q)[0] > 0
            # shared image equals the intersection of the B_i images
            eye = np.eye(n)
            residuals = np.vstack(
                [eye - s.w @ s.w.T for s in dec.splits]
            )
            common = kernel_basis(residuals)
            assert common.shape[1] == dec.p_s
            if dec.p_s:
                qm, _ = np.linalg.qr(dec.m)
                proj_m = qm @ qm.T
                proj_c = common @ common.T
                np.testing.assert_allclose(proj_m, proj_c, atol=1e-8)

    def test_wrong_count_rejected(self):
        g = build_graph(2, [(1, 2)])
        with pytest.raises(DimensionMismatch):
            build_decomposition(g, [np.eye(2)])


class TestBlendedRankDeficient:
    def test_identity_b_reduces_to_plain_average(self):
        g = generate_graph("complete", 3)
        funcs = [lambda t, x: -x + np.array([1.0, 0.0]),
                 lambda t, x: np.array([np.sin(x[0]), x[1]]),
                 lambda t, x: x ** 2 - 1.0]
        fields = [VectorField(dim=2, eval=f) for f in funcs]
        dec = build_decomposition(g, [np.eye(2)] * 3)
        model = blended_rank_deficient(fields, dec)
        assert model.reduced_field.dim == 2  # no kernel coordinates
        rng = np.random.default_rng(6)
        for _ in range(20):
            s = rng.normal(size=2)
            x_sync = 3.0 * dec.m @ s
            ds = model.reduced_field.eval(0.0, s)
            mean_f = sum(f(0.0, x_sync) for f in funcs) / 3.0
            # d/dt of the synchronized point must equal the plain average
            np.testing.assert_allclose(3.0 * dec.m @ ds, mean_f, atol=1e-9)

    def test_zero_fields_give_zero_model(self):
        g = build_graph(2, [(1, 2)])
        dec = build_decomposition(g, [np.diag([1.0, 0.0]), np.eye(2)])
        fields = [VectorField(dim=2, eval=lambda t, x: np.zeros_like(x))] * 2
        model = blended_rank_deficient(fields, dec)
        rng = np.random.default_rng(12)
        slow = rng.normal(size=model.reduced_field.dim)
        got = model.reduced_field.eval(0.0, slow)
        np.testing.assert_allclose(got, np.zeros_like(slow), atol=1e-15)

    def test_project_reconstruct_roundtrip(self):
        g = build_graph(2, [(1, 2)])
        dec = build_decomposition(g, [np.diag([1.0, 0.0]), np.eye(2)])
        fields = [VectorField(dim=2, eval=lambda t, x: np.zeros_like(x))] * 2
        model = blended_rank_deficient(fields, dec)
        rng = np.random.default_rng(7)
        for _ in range(10):
            slow = rng.normal(size=model.reduced_field.dim)
            np.testing.assert_allclose(
                model.project(model.reconstruct(slow)), slow, atol=1e-9
            )

    def test_slow_model_tracks_full_network(self):
        g = build_graph(2, [(1, 2)])
        b_list = [np.diag([1.0, 0.0]), np.eye(2)]
        dec = build_decomposition(g, b_list)
        funcs = [
            lambda t, x: -x + np.array([1.0, 2.0]),
            lambda t, x: -x + np.array([-1.0, 0.5]),
        ]
        fields = [VectorField(dim=2, eval=f) for f in funcs]
        model = blended_rank_deficient(fields, dec)

        x0 = np.array([0.5, -0.5, 1.0, 0.8])
        full = assemble_rank_deficient(fields, g, 1000.0, b_list)
        traj = integrate(full, x0, 0.0, 5.0, SolverOptions(method="rk4", h=1e-4))

        slow_sys = as_network_system(model)
        slow_traj = integrate(slow_sys, model.project(x0), 0.0, 5.0,
                              SolverOptions(method="rk4", h=1e-3))
        got = model.project(traj.states[-1])
        np.testing.assert_allclose(got, slow_traj.states[-1], atol=0.05)

    def test_field_count_mismatch(self):
        g = build_graph(2, [(1, 2)])
        dec = build_decomposition(g, [np.eye(1), np.eye(1)])
        with pytest.raises(DimensionMismatch):
            blended_rank_deficient(
                [VectorField(dim=1, eval=lambda t, x: x)], dec
            )


class TestContractionEstimate:
    def test_counting_blended_constant_jacobian(self):
        model = blended_state(counting_fields(5))
        samples = [(0.0, np.array([s])) for s in (-1.0, 0.0, 2.0, 10.0)]
        got = contraction_estimate(model.reduced_field, samples)
        assert got == pytest.approx(-2.0 / 5.0, abs=1e-6)

    def test_expanding_field_positive(self):
        f = VectorField(dim=1, eval=lambda t, x: x)
        got = contraction_estimate(f, [(0.0, np.array([0.0]))])
        assert got == pytest.approx(2.0, abs=1e-6)

    def test_metric_scales_result(self):
        f = VectorField(dim=1, eval=lambda t, x: -x)
        got = contraction_estimate(
            f, [(0.0, np.array([1.0]))], metric=np.array([[2.0]])
        )
        assert got == pytest.approx(-4.0, abs=1e-6)

    def test_nonfinite_jacobian_raises(self):
        f = VectorField(dim=1, eval=lambda t, x: x * np.nan)
        with pytest.raises(NonFiniteJacobian):
            contraction_estimate(f, [(0.0, np.array([1.0]))])


class TestEmergentNodeFunnel:
    def arctan_maps(self, n, delta=1e-3):
        spec = FunnelSpec.node(1.0, 1.0, 0.0, delta=delta)
        return [spec.inverse] * n

    def test_odd_pair_gives_zero(self):
        fields = [const_scalar(-1.0), const_scalar(1.0)]
        f_s = emergent_node_funnel(fields, self.arctan_maps(2))
        assert abs(float(f_s.eval(0.0, np.array([0.0]))[0])) < 1e-9

    def test_midpoint_for_symmetric_pair(self):
        fields = [const_scalar(0.0), const_scalar(1.0)]
        f_s = emergent_node_funnel(fields, self.arctan_maps(2))
        assert float(f_s.eval(0.0, np.array([5.0]))[0]) == pytest.approx(
            0.5, abs=1e-9
        )

    def test_small_delta_approaches_median(self):
        fields = [const_scalar(0.0), const_scalar(0.0), const_scalar(3.0)]
        f_s = emergent_node_funnel(fields, self.arctan_maps(3, delta=1e-4))
        root = float(f_s.eval(0.0, np.array([0.0]))[0])
        assert abs(root) < 1e-4

    def test_root_stays_in_bracket(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            vals = rng.normal(size=4)
            fields = [const_scalar(v) for v in vals]
            f_s = emergent_node_funnel(fields, self.arctan_maps(4, delta=0.3))
            root = float(f_s.eval(0.0, np.array([0.0]))[0])
            assert vals.min() - 1e-12 <= root <= vals.max() + 1e-12

    def test_all_equal_fields_short_circuit(self):
        fields = [const_scalar(2.0)] * 3
        f_s = emergent_node_funnel(fields, self.arctan_maps(3))
        assert float(f_s.eval(0.0, np.array([0.0]))[0]) == pytest.approx(2.0)

    def test_no_bracket_detected(self):
        fields = [const_scalar(0.0), const_scalar(1.0)]
        maps = [lambda t, u: np.arctan(u) + 5.0] * 2
        f_s = emergent_node_funnel(fields, maps)
        with pytest.raises(NoBracket):
            f_s.eval(0.0, np.array([0.0]))

    def test_not_monotone_detected(self):
        fields = [const_scalar(0.0), const_scalar(1.0)]
        maps = [lambda t, u: -u] * 2
        f_s = emergent_node_funnel(fields, maps)
        with pytest.raises(NotMonotone):
            f_s.eval(0.0, np.array([0.0]))

    def test_map_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            emergent_node_funnel([const_scalar(0.0)], self.arctan_maps(2))
