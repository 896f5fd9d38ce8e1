import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocklista import CapabilityError, NumericalError, ValidationError
from blocklista.diagnostics import coupling_error, ista_reduction_error, random_schedule, random_weights
from blocklista.model import (
    GridSpec,
    SamplingPattern,
    apply_dictionary,
    build_dictionary,
    draw_instance,
    make_rng,
    sample_pattern,
)
from blocklista.networks import (
    AdaBlistaCpParams,
    AdaBlockListaParams,
    AdaListaParams,
    LayerSchedule,
    ada_blista_cp_forward,
    ada_blocklista_forward,
    adalista_forward,
    block_coherence_residual,
    correlation,
    couple_weights,
    identity_params,
    mutual_coherence,
    param_count,
    unrolled_forward,
)
from blocklista.solvers import block_norms, default_lambda, lipschitz_constant


def random_dict(P, Q, N, seed=0, normalize=False):
    grid = GridSpec(P, Q)
    return build_dictionary(grid, sample_pattern(grid, N, make_rng(seed)), normalize)


def full_dict(P, Q, normalize=True):
    grid = GridSpec(P, Q)
    return build_dictionary(grid, SamplingPattern(tuple(range(1, grid.M + 1)), grid.M), normalize)


def batch(d, n=3, snr=20.0, seed=0):
    return np.stack([draw_instance(d, 2, snr, seed, (0, i)).y for i in range(n)])


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture(scope="module")
def desk():
    return random_dict(4, 16, 32, seed=2)


class TestSchedule:
    def test_validation(self):
        with pytest.raises(ValidationError):
            LayerSchedule([0.1, 0.0], [1.0, 1.0])
        with pytest.raises(ValidationError):
            LayerSchedule([0.1], [1.0, 1.0])
        with pytest.raises(ValidationError):
            LayerSchedule([0.1], [-1.0])
        assert LayerSchedule.constant(4, 0.1, 0.2).depth == 4


class TestForward:
    @pytest.mark.parametrize("fwd, cls", [
        (adalista_forward, AdaListaParams),
        (ada_blocklista_forward, AdaBlockListaParams),
        (ada_blista_cp_forward, AdaBlistaCpParams),
    ])
    def test_zero_measurement(self, desk, fwd, cls):
        arch = cls.arch
        params = identity_params(arch, desk, LayerSchedule.constant(5, 0.01, 0.015))
        np.testing.assert_array_equal(fwd(params, desk, np.zeros(desk.N)).estimate, 0)

    def test_huge_threshold(self, desk):
        params = identity_params("adalista", desk, LayerSchedule.constant(1, 1e6, 0.015))
        np.testing.assert_array_equal(adalista_forward(params, desk, batch(desk)).estimate, 0)

    @pytest.mark.parametrize("arch", ["adalista", "adablock", "adablistacp"])
    def test_ista_reduction(self, desk, arch):
        lam = float(default_lambda(desk, 0.1))
        assert ista_reduction_error(arch, desk, batch(desk, 4), lam, 10) <= 1e-12

    def test_layers_recorded(self, desk):
        params = identity_params("adablistacp", desk, LayerSchedule.constant(6, 0.01, 0.015))
        tr = unrolled_forward(params, desk, batch(desk), keep_layers=True)
        assert len(tr.per_layer_estimates) == 7
        np.testing.assert_array_equal(tr.per_layer_estimates[0], 0)
        np.testing.assert_array_equal(tr.per_layer_estimates[-1], tr.estimate)

    def test_single_vector_shape(self, desk):
        params = identity_params("adablock", desk, LayerSchedule.constant(2, 0.01, 0.015))
        assert unrolled_forward(params, desk, batch(desk)[0]).estimate.shape == (desk.M,)

    def test_shape_errors(self, desk):
        params = identity_params("adablistacp", desk, LayerSchedule.constant(2, 0.01, 0.015))
        with pytest.raises(ValidationError):
            unrolled_forward(params, desk, np.zeros(desk.N + 1))
        bad = AdaBlockListaParams(np.zeros((3, desk.N, desk.N)), params.schedule)
        with pytest.raises(ValidationError):
            unrolled_forward(bad, desk, np.zeros(desk.N))

    def test_non_finite_names_layer(self, desk):
        sched = LayerSchedule([0.01, 0.01], [1e300, 1e300])
        params = identity_params("adalista", desk, sched)
        with pytest.raises(NumericalError, match="layer"):
            unrolled_forward(params, desk, batch(desk))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), P=st.integers(1, 4), Q=st.integers(2, 16), T=st.integers(0, 12))
    def test_coupling_equivalence(self, seed, P, Q, T):
        rng = make_rng(seed)
        N = int(rng.integers(1, P * Q + 1))
        d = random_dict(P, Q, N, seed)
        L = lipschitz_constant(d)
        sched = random_schedule(T, L, rng) if T else LayerSchedule([], [])
        Y = crandn(rng, 3, d.N)
        assert coupling_error(d, random_weights((d.N, d.N), rng), sched, Y) <= 1e-10

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), arch=st.sampled_from(["adalista", "adablock", "adablistacp"]))
    def test_threshold_support_law(self, desk, seed, arch):
        rng = make_rng(seed)
        shape = (desk.Q, desk.N, desk.N) if arch == "adablock" else (desk.N, desk.N)
        params = identity_params(arch, desk, random_schedule(5, lipschitz_constant(desk), rng))
        params = type(params)(random_weights(shape, rng, 0.3), params.schedule)
        Y = crandn(rng, 2, desk.N)
        layers = unrolled_forward(params, desk, Y, keep_layers=True).per_layer_estimates
        corr, bs = correlation(params, desk)
        for t in range(params.schedule.depth):
            z = layers[t] + params.schedule.step_sizes[t] * corr(Y - apply_dictionary(desk, layers[t]))
            active = block_norms(layers[t + 1], bs) > 0
            assert np.all(block_norms(z, bs)[active] > params.schedule.thresholds[t])


class TestCoupling:
    def test_first_and_identity(self, desk):
        w1 = random_weights((desk.N, desk.N), make_rng(0))
        W = couple_weights(w1, desk)
        np.testing.assert_array_equal(W[0], w1)
        np.testing.assert_allclose(couple_weights(np.eye(desk.N), desk), np.broadcast_to(np.eye(desk.N), W.shape), atol=1e-15)

    def test_similarity_preserves_eigenvalues(self):
        d = random_dict(4, 4, 8, seed=1)
        w1 = crandn(make_rng(1), d.N, d.N)
        ev = np.sort_complex(np.linalg.eigvals(w1))
        for wq in couple_weights(w1, d):
            np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(wq)), ev, atol=1e-8)


class TestCoherence:
    def test_orthogonal_full_sampling(self):
        d = full_dict(4, 4)
        assert mutual_coherence(np.eye(d.N), d)["max_off_diag"] <= 1e-12
        res = block_coherence_residual(np.broadcast_to(np.eye(d.N), (d.Q, d.N, d.N)), d)
        assert res["max_intra"] <= 1e-12 and res["max_cross"] <= 1e-12

    def test_zero_weight(self, desk):
        assert mutual_coherence(np.zeros((desk.N, desk.N)), desk)["max_diag_deviation"] == 1.0
        assert block_coherence_residual(np.zeros((desk.Q, desk.N, desk.N)), desk)["max_intra"] == 1.0

    def test_brute_force_coherence(self):
        d = random_dict(2, 4, 5, seed=3)
        phi = d.dense()
        cols = [phi[:, i] / np.linalg.norm(phi[:, i]) for i in range(d.M)]
        worst = max(abs(np.vdot(cols[i], cols[j])) for i in range(d.M) for j in range(d.M) if i != j)
        assert abs(mutual_coherence(np.eye(d.N), d)["max_off_diag"] - worst) <= 1e-12

    def test_factorized_matches_explicit(self, desk):
        w1 = random_weights((desk.N, desk.N), make_rng(4), 0.3)
        a = block_coherence_residual(couple_weights(w1, desk), desk)
        b = block_coherence_residual(w1, desk)
        assert abs(a["max_intra"] - b["max_intra"]) <= 1e-12
        assert abs(a["max_cross"] - b["max_cross"]) <= 1e-12

    @pytest.mark.parametrize("shift", [1, 5, 15])
    def test_shift_invariance(self, desk, shift):
        # brute force over block pairs with both indices rotated by a fixed shift
        w1 = random_weights((desk.N, desk.N), make_rng(5), 0.3)
        W = couple_weights(w1, desk)
        phi1 = desk.phi1 / np.linalg.norm(desk.phi1, axis=0)
        blocks = [desk.lambda_diag[:, None] ** q * phi1 for q in range(desk.Q)]

        def residuals(s):
            intra = cross = 0.0
            for q in range(desk.Q):
                a = (q + s) % desk.Q
                for qq in range(desk.Q):
                    b = (qq + s) % desk.Q
                    g = blocks[a].conj().T @ W[a].conj().T @ blocks[b]
                    if q == qq:
                        intra = max(intra, np.max(np.abs(g - np.eye(desk.P))))
                    else:
                        cross = max(cross, np.max(np.abs(g)))
            return intra, cross

        ref = block_coherence_residual(w1, desk)
        intra, cross = residuals(shift)
        assert abs(intra - ref["max_intra"]) <= 1e-12
        assert abs(cross - ref["max_cross"]) <= 1e-12

    def test_guard(self):
        d = random_dict(4, 1025, 8)
        with pytest.raises(CapabilityError):
            mutual_coherence(np.eye(8), d)
        with pytest.raises(CapabilityError):
            block_coherence_residual(np.eye(8), d)


class TestParamCount:
    def test_closed_form(self):
        d = random_dict(4, 4, 8)
        s = LayerSchedule.constant(3, 0.1, 0.1)
        assert param_count(identity_params("adablistacp", d, s)) == {"real_scalars": 134, "weights_real_scalars": 128}
        assert param_count(identity_params("adablock", d, s)) == {"real_scalars": 518, "weights_real_scalars": 512}
        assert param_count(identity_params("adalista", d, s)) == param_count(identity_params("adablistacp", d, s))

    def test_cp_independent_of_q(self):
        s = LayerSchedule.constant(3, 0.1, 0.1)
        counts = {Q: param_count(identity_params("adablistacp", random_dict(4, Q, 16), s))["weights_real_scalars"]
                  for Q in (4, 16, 64)}
        assert len(set(counts.values())) == 1
