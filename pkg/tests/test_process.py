import numpy as np
import pytest
from scipy import stats

from ddseq.oracle import enumerate_posterior, posterior_position, single_marginal, support_tokens
from ddseq.process import NoisedSequence, TokenSequence, corrupt, forward_kernel, marginal, posterior_step
from ddseq.schedule import Stationary, linear_schedule, mixture_constants
from ddseq.vocab import build_vocab

TINY = build_vocab(["A", "B"])
FULL = build_vocab()


def test_marginal_absorbing_hand_values():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    a = FULL.index["A"]
    p = marginal(a, 1, s)  # alpha = 0.75
    assert p[a] == pytest.approx(0.75)
    assert p[FULL.mask_id] == pytest.approx(0.25)
    assert p.sum() == pytest.approx(1.0)


def test_marginal_uniform_hand_values():
    s = linear_schedule(2, Stationary.UNIFORM, TINY)
    a, b = TINY.index["A"], TINY.index["B"]
    p = marginal(a, 1, s)  # alpha = 0.5, uniform over {A,B}
    assert p[a] == pytest.approx(0.75)
    assert p[b] == pytest.approx(0.25)


def test_marginal_t0_one_hot():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    p = marginal(FULL.index["C"], 0, s)
    assert p[FULL.index["C"]] == 1.0 and p.sum() == 1.0


def test_marginal_rejects_specials():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    with pytest.raises(ValueError):
        marginal(FULL.mask_id, 1, s)
    with pytest.raises(ValueError):
        marginal(FULL.pad_id, 1, s)


def test_forward_kernel_identity_when_beta_one():
    import dataclasses

    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    s1 = dataclasses.replace(s, beta=np.array([1.0, 1.0, 1.0, 1.0]))
    k = forward_kernel(FULL.index["A"], 2, s1)
    assert k[FULL.index["A"]] == 1.0


def test_forward_kernel_hand_values_and_fixed_point():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    a = FULL.index["A"]
    k = forward_kernel(a, 1, s)  # beta_1 = 0.75
    assert k[a] == pytest.approx(0.75)
    assert k[FULL.mask_id] == pytest.approx(0.25)
    k_mask = forward_kernel(FULL.mask_id, 2, s)
    assert k_mask[FULL.mask_id] == pytest.approx(1.0)


def test_forward_kernel_rejects_t0():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    with pytest.raises(ValueError):
        forward_kernel(FULL.index["A"], 0, s)


def test_corrupt_t0_identity():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    x0 = TokenSequence.from_str("ACDEF", FULL)
    out = corrupt(x0, 0, s, rng_seed=1)
    np.testing.assert_array_equal(out.ids, x0.ids)
    assert not out.noised.any()


def test_corrupt_final_step_all_mask():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    x0 = TokenSequence.from_str("ACDEF", FULL)
    out = corrupt(x0, 4, s, rng_seed=1)
    assert np.all(out.ids == FULL.mask_id)
    assert out.noised.all()


def test_corrupt_empirical_mask_fraction():
    # alpha_t = 0.5 at t=2, T=4; L = 1e5
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    x0 = TokenSequence(np.full(100_000, TINY.index["A"], dtype=np.int64))
    out = corrupt(x0, 2, s, rng_seed=7)
    frac = (out.ids == TINY.mask_id).mean()
    assert abs(frac - 0.5) < 0.005


def test_corrupt_deterministic_and_stream_isolated():
    s = linear_schedule(8, Stationary.UNIFORM, FULL)
    x0 = TokenSequence.from_str("ACDEFGHIKL", FULL)
    a = corrupt(x0, 3, s, rng_seed=5, seq_key=2)
    b = corrupt(x0, 3, s, rng_seed=5, seq_key=2)
    np.testing.assert_array_equal(a.ids, b.ids)
    np.testing.assert_array_equal(a.noised, b.noised)
    c = corrupt(x0, 3, s, rng_seed=5, seq_key=3)
    assert not np.array_equal(a.ids, c.ids) or not np.array_equal(a.noised, c.noised)


def test_corrupt_out_of_range_t():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    x0 = TokenSequence.from_str("ACD", FULL)
    with pytest.raises(ValueError):
        corrupt(x0, 5, s, rng_seed=0)


def test_corrupt_empty_sequence():
    s = linear_schedule(4, Stationary.ABSORBING, FULL)
    x0 = TokenSequence(np.array([], dtype=np.int64))
    out = corrupt(x0, 2, s, rng_seed=0)
    assert out.length == 0


def test_corrupt_uniform_noised_is_literal_difference():
    s = linear_schedule(4, Stationary.UNIFORM, TINY)
    x0 = TokenSequence(np.full(50_000, TINY.index["A"], dtype=np.int64))
    out = corrupt(x0, 3, s, rng_seed=11)
    np.testing.assert_array_equal(out.noised, out.ids != x0.ids)
    # uniform draws can land back on A, so the hit rate exceeds the noised rate
    assert out.noised.mean() < 1.0 - s.alpha_at(3)


def test_posterior_step_lambda2_one_reveals_everything():
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    c = mixture_constants(s)
    x0 = TokenSequence.from_str("ABAB", TINY)
    xt = corrupt(x0, 1, s, rng_seed=3)  # t=1 => lambda2_0 = 1
    out = posterior_step(xt, x0, s, c, rng_seed=3)
    np.testing.assert_array_equal(out.ids, x0.ids)
    assert out.t == 0


def test_posterior_step_rejects_mask_in_x0hat():
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    c = mixture_constants(s)
    xt = NoisedSequence(np.array([TINY.mask_id]), t=2, noised=np.array([True]))
    bad = TokenSequence(np.array([TINY.mask_id]))
    with pytest.raises(ValueError):
        posterior_step(xt, bad, s, c, rng_seed=0)


def test_posterior_step_masked_position_hand_probability():
    # absorbing, linear T=4, t=2: P(reveal) = lambda2_1 = 0.5
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    c = mixture_constants(s)
    n = 100_000
    xt = NoisedSequence(np.full(n, TINY.mask_id), t=2, noised=np.ones(n, dtype=bool))
    x0hat = TokenSequence(np.full(n, TINY.index["A"], dtype=np.int64))
    out = posterior_step(xt, x0hat, s, c, rng_seed=13)
    reveal_rate = (out.ids == TINY.index["A"]).mean()
    assert abs(reveal_rate - 0.5) < 0.005
    assert abs((out.ids == TINY.mask_id).mean() - 0.5) < 0.005


def test_posterior_step_expected_residual_masks_at_t1():
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    c = mixture_constants(s)
    n = 100_000
    xt = NoisedSequence(np.full(n, TINY.mask_id), t=1, noised=np.ones(n, dtype=bool))
    x0hat = TokenSequence(np.full(n, TINY.index["B"], dtype=np.int64))
    out = posterior_step(xt, x0hat, s, c, rng_seed=17)
    expected_mask_fraction = 1.0 - c.lambda2[0]
    assert abs((out.ids == TINY.mask_id).mean() - expected_mask_fraction) < 0.01


@pytest.mark.parametrize("stationary", [Stationary.ABSORBING, Stationary.UNIFORM])
@pytest.mark.parametrize("T", [2, 4])
def test_posterior_step_chi_squared_against_enumeration(stationary, T):
    schedule = linear_schedule(T, stationary, TINY)
    c = mixture_constants(schedule)
    n = 100_000
    for t in range(1, T + 1):
        for x0_tok in TINY.amino_ids:
            for xt_tok in support_tokens(schedule):
                if single_marginal(x0_tok, t, schedule)[xt_tok] == 0.0:
                    continue
                expected = posterior_position(xt_tok, x0_tok, t, schedule)
                xt = NoisedSequence(np.full(n, xt_tok), t=t, noised=np.full(n, xt_tok != x0_tok))
                x0hat = TokenSequence(np.full(n, x0_tok, dtype=np.int64))
                out = posterior_step(xt, x0hat, schedule, c, rng_seed=hash((stationary.value, T, t, x0_tok, xt_tok)) % 2**31)
                counts = np.bincount(out.ids, minlength=TINY.size).astype(float)
                support = expected > 0
                chi2 = ((counts[support] - n * expected[support]) ** 2 / (n * expected[support])).sum()
                dof = int(support.sum()) - 1
                if dof == 0:
                    assert counts[support][0] == n
                else:
                    pvalue = stats.chi2.sf(chi2, dof)
                    assert pvalue > 1e-3, (stationary, T, t, x0_tok, xt_tok, pvalue)
                # no mass outside the enumerated support
                assert counts[~support].sum() == 0


def test_posterior_step_full_sequence_matches_enumeration():
    s = linear_schedule(4, Stationary.ABSORBING, TINY)
    c = mixture_constants(s)
    x0 = TokenSequence.from_str("AB", TINY)
    m = TINY.mask_id
    xt = NoisedSequence(np.array([TINY.index["A"], m]), t=2, noised=np.array([False, True]))
    expected = enumerate_posterior(xt, x0, 2, s)
    counts: dict[tuple, int] = {}
    n = 20_000
    for i in range(n):
        out = posterior_step(xt, x0, s, c, rng_seed=i)
        key = tuple(out.ids.tolist())
        counts[key] = counts.get(key, 0) + 1
    assert set(counts) <= set(expected.probs)
    for state, p in expected.probs.items():
        assert counts.get(state, 0) / n == pytest.approx(p, abs=0.02)


def test_absorbing_noised_flag_tracks_mask():
    s = linear_schedule(6, Stationary.ABSORBING, FULL)
    c = mixture_constants(s)
    x0 = TokenSequence.from_str("ACDEFGHIKLMNPQ", FULL)
    xt = corrupt(x0, 5, s, rng_seed=23)
    np.testing.assert_array_equal(xt.noised, xt.ids == FULL.mask_id)
    stepped = posterior_step(xt, x0, s, c, rng_seed=23)
    np.testing.assert_array_equal(stepped.noised, stepped.ids == FULL.mask_id)
