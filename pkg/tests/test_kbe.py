import numpy as np
import pytest

from hrere.errors import DataError
from hrere.kb import generate_synthetic_kb
from hrere.kbe import (
    ComplexEmbeddingTable,
    KbeHyper,
    grad_score,
    init_table,
    kb_relation_distribution,
    load_checkpoint,
    pair_scores,
    pretrain,
    save_checkpoint,
    score,
)


class TestScore:
    def test_hand_case(self):
        # d=1: (1+2i) * i * conj(3+i) has real part -5
        assert score([1 + 2j], [1j], [3 + 1j]) == pytest.approx(-5.0, abs=1e-12)

    def test_matches_complex_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = int(rng.integers(1, 12))
            h, r, t = (rng.normal(size=d) + 1j * rng.normal(size=d) for _ in range(3))
            want = float(np.real(np.sum(h * r * np.conj(t))))
            np.testing.assert_allclose(score(h, r, t), want, rtol=1e-12, atol=1e-12)

    def test_conjugate_symmetry(self):
        # Re(sum h r conj(t)) == Re(sum t conj(r) conj(h))
        rng = np.random.default_rng(1)
        for _ in range(20):
            h, r, t = (rng.normal(size=4) + 1j * rng.normal(size=4) for _ in range(3))
            np.testing.assert_allclose(score(h, r, t), score(t, np.conj(r), h), rtol=1e-12)

    def test_real_relation_is_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h, t = (rng.normal(size=5) + 1j * rng.normal(size=5) for _ in range(2))
            r = rng.normal(size=5) + 0j
            np.testing.assert_allclose(score(h, r, t), score(t, r, h), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            score([1 + 0j], [1 + 0j, 2 + 0j], [1 + 0j])


class TestGradScore:
    def test_hand_case_tail_real_part(self):
        _, _, g_t = grad_score([1 + 2j], [1j], [3 + 1j])
        assert g_t.real[0] == pytest.approx(-2.0, abs=1e-12)

    def test_against_central_differences(self):
        rng = np.random.default_rng(3)
        eps = 1e-6
        for _ in range(20):
            d = int(rng.integers(1, 8))
            vecs = [rng.normal(size=d) + 1j * rng.normal(size=d) for _ in range(3)]
            grads = grad_score(*vecs)
            for vi in range(3):
                for k in range(d):
                    for part in (1.0, 1j):
                        delta = np.zeros(d, dtype=complex)
                        delta[k] = part * eps
                        args_p = [v + (delta if i == vi else 0) for i, v in enumerate(vecs)]
                        args_m = [v - (delta if i == vi else 0) for i, v in enumerate(vecs)]
                        fd = (score(*args_p) - score(*args_m)) / (2 * eps)
                        got = grads[vi][k].real if part == 1.0 else grads[vi][k].imag
                        np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-8)


class TestDistribution:
    def hand_table(self, rel_re_rows):
        # h = t = 1+0i in d=1, so phi_r = rel_re[r]
        e = np.ones((2, 1))
        return ComplexEmbeddingTable(
            e.copy(), np.zeros((2, 1)), np.asarray(rel_re_rows, float).reshape(-1, 1),
            np.zeros((len(rel_re_rows), 1)),
        )

    def test_hand_softmax(self):
        table = self.hand_table([np.log(3.0), 0.0])
        dist = kb_relation_distribution(table, 0, 1)
        np.testing.assert_allclose(dist, [0.75, 0.25], rtol=0, atol=1e-12)

    def test_valid_distribution_random(self):
        rng = np.random.default_rng(4)
        table = init_table(10, 5, 8, 1.0, rng)
        for _ in range(50):
            h, t = rng.integers(10, size=2)
            dist = kb_relation_distribution(table, int(h), int(t))
            assert dist.shape == (5,)
            assert (dist > 0).all()
            np.testing.assert_allclose(dist.sum(), 1.0, rtol=0, atol=1e-12)

    def test_extreme_scores_stay_finite(self):
        table = self.hand_table([5000.0, -5000.0, 0.0])
        dist = kb_relation_distribution(table, 0, 1)
        assert np.isfinite(dist).all()
        np.testing.assert_allclose(dist.sum(), 1.0, atol=1e-12)

    def test_pair_scores_match_score(self):
        rng = np.random.default_rng(5)
        table = init_table(6, 4, 7, 0.5, rng)
        got = pair_scores(table, [2, 3], [4, 0])
        for b, (h, t) in enumerate([(2, 4), (3, 0)]):
            for r in range(4):
                want = score(table.entity_vector(h), table.relation_vector(r), table.entity_vector(t))
                np.testing.assert_allclose(got[b, r], want, rtol=1e-12, atol=1e-12)


class TestPretrain:
    def test_deterministic(self):
        kb = generate_synthetic_kb(30, 3, 80, seed=1)
        hyper = KbeHyper(d_k=8, pretrain_epochs=5)
        a = pretrain(kb, hyper, seed=2)
        b = pretrain(kb, hyper, seed=2)
        for x, y in zip(a.params().values(), b.params().values()):
            assert x.tobytes() == y.tobytes()

    def test_zero_epochs_is_init(self):
        kb = generate_synthetic_kb(30, 3, 80, seed=1)
        hyper = KbeHyper(d_k=8, pretrain_epochs=0)
        table = pretrain(kb, hyper, seed=2)
        want = init_table(30, 4, 8, hyper.init_scale, np.random.default_rng(2))
        for x, y in zip(table.params().values(), want.params().values()):
            assert x.tobytes() == y.tobytes()

    def test_separates_facts_from_corruptions(self):
        kb = generate_synthetic_kb(40, 4, 150, seed=3)
        table = pretrain(kb, KbeHyper(d_k=16, pretrain_epochs=60, pretrain_lr=0.02), seed=4)
        rng = np.random.default_rng(5)
        pos = []
        neg = []
        for t in kb.triples[:100]:
            pos.append(score(table.entity_vector(t.head), table.relation_vector(t.rel),
                             table.entity_vector(t.tail)))
            while True:
                cand = int(rng.integers(40))
                if (cand, t.rel, t.tail) not in kb.triple_set and cand != t.tail:
                    break
            neg.append(score(table.entity_vector(cand), table.relation_vector(t.rel),
                             table.entity_vector(t.tail)))
        assert np.mean(pos) - np.mean(neg) > 0.5

    def test_na_row_untouched(self):
        kb = generate_synthetic_kb(30, 3, 80, seed=1)
        hyper = KbeHyper(d_k=8, pretrain_epochs=3)
        trained = pretrain(kb, hyper, seed=2)
        virgin = init_table(30, 4, 8, hyper.init_scale, np.random.default_rng(2))
        na = kb.na_id
        assert trained.relation_re[na].tobytes() == virgin.relation_re[na].tobytes()
        assert trained.relation_im[na].tobytes() == virgin.relation_im[na].tobytes()
        assert trained.relation_re[0].tobytes() != virgin.relation_re[0].tobytes()


class TestCheckpointIO:
    def test_round_trip_bytes(self, tmp_path):
        table = init_table(9, 4, 6, 0.1, np.random.default_rng(0))
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(table, p1)
        back = load_checkpoint(p1)
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for x, y in zip(table.params().values(), back.params().values()):
            assert x.tobytes() == y.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"WHAT" + b"\0" * 32)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        table = init_table(9, 4, 6, 0.1, np.random.default_rng(0))
        p = tmp_path / "a.bin"
        save_checkpoint(table, p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(DataError, match="truncated|trailing"):
            load_checkpoint(p)
