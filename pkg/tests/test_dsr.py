import numpy as np
import pytest

import nightadapt.dsr as D
import nightadapt.losses as L
from nightadapt.taxonomy import IGNORE, default_taxonomy
from nightadapt.tensor import Tensor

TAX = default_taxonomy()


class TestClassMask:
    def test_membership_indicator(self):
        label = np.array([[2, 3], [3, 2]], dtype=np.uint8)
        out = D.class_mask(label, {3})
        np.testing.assert_array_equal(out.mask, [[0, 1], [1, 0]])

    def test_empty_class_set(self):
        label = np.array([[2, 3], [3, 2]], dtype=np.uint8)
        assert not D.class_mask(label, set()).mask.any()

    def test_full_taxonomy_equals_not_ignore(self):
        label = np.array([[0, 255], [9, 4]], dtype=np.uint8)
        out = D.class_mask(label, set(range(10)))
        np.testing.assert_array_equal(out.mask, (label != IGNORE).astype(np.uint8))

    def test_255_maps_to_zero(self):
        label = np.full((2, 2), 255, dtype=np.uint8)
        assert not D.class_mask(label, set(range(10))).mask.any()


class TestSelectRandomClasses:
    def test_half_rounded_up(self):
        label = np.array([0, 1, 2, 3], dtype=np.uint8).reshape(2, 2)
        rng = np.random.default_rng(0)
        assert len(D.select_random_classes(label, rng)) == 2
        label3 = np.array([0, 1, 2, 2], dtype=np.uint8).reshape(2, 2)
        assert len(D.select_random_classes(label3, rng)) == 2  # ceil(3/2)

    def test_single_class_selected(self):
        label = np.full((2, 2), 5, dtype=np.uint8)
        assert D.select_random_classes(label, np.random.default_rng(1)) == {5}

    def test_uniform_selection_binomial_bound(self):
        label = np.array([0, 1, 2, 3], dtype=np.uint8).reshape(2, 2)
        rng = np.random.default_rng(42)
        counts = dict.fromkeys(range(4), 0)
        n = 1000
        for _ in range(n):
            for cid in D.select_random_classes(label, rng):
                counts[cid] += 1
        sigma = np.sqrt(n * 0.5 * 0.5)
        for cid in range(4):
            assert abs(counts[cid] - 500) <= 3 * sigma

    def test_no_valid_class_errors(self):
        with pytest.raises(ValueError):
            D.select_random_classes(np.full((2, 2), IGNORE, dtype=np.uint8), np.random.default_rng(0))


class TestCompositeMask:
    def test_union_semantics(self):
        m_r = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        m_m = np.array([[0, 0], [0, 1]], dtype=np.uint8)
        np.testing.assert_array_equal(np.maximum(m_r, m_m), [[1, 0], [0, 1]])

    def test_no_dynamic_classes_reduces_to_random(self):
        label = np.array([[0, 1], [2, 3]], dtype=np.uint8)  # static only
        rng = np.random.default_rng(2)
        out = D.composite_mask(label, rng, TAX)
        assert out.selected_classes <= {0, 1, 2, 3}
        assert len(out.selected_classes) == 2

    def test_dynamic_mask_subset_of_composite(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            label = rng.integers(0, 10, size=(8, 8)).astype(np.uint8)
            out = D.composite_mask(label, rng, TAX)
            m_m = D.class_mask(label, TAX.dynamic_small_ids).mask
            assert np.all(out.mask >= m_m)

    def test_mask_matches_selected_classes_invariant(self):
        rng = np.random.default_rng(9)
        label = rng.integers(0, 10, size=(6, 6)).astype(np.uint8)
        out = D.composite_mask(label, rng, TAX)
        expected = np.isin(label, sorted(out.selected_classes))
        np.testing.assert_array_equal(out.mask.astype(bool), expected)

    def test_forced_subsets(self):
        label = np.array([[4, 7], [0, 1]], dtype=np.uint8)  # pole (small), person (dynamic)
        rng = np.random.default_rng(0)
        out_small = D.composite_mask(label, rng, TAX, forced_classes="small")
        assert 4 in out_small.selected_classes
        out_none = D.composite_mask(label, np.random.default_rng(3), TAX, forced_classes="none")
        assert len(out_none.selected_classes) == 2  # ceil(4/2) random only


class TestMixup:
    def test_pixelwise_selection(self):
        m = D.CompositeMask(np.array([[1, 0], [0, 1]], dtype=np.uint8), {0})
        xs = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        xn = (10 + np.arange(4, dtype=np.float32)).reshape(1, 2, 2)
        out = D.image_mixup(xs, xn, m).numpy()
        np.testing.assert_array_equal(out[0], [[0, 11], [12, 3]])

    def test_all_zero_mask_is_night(self):
        m = D.CompositeMask(np.zeros((2, 2), dtype=np.uint8), set())
        xs = np.ones((3, 2, 2), dtype=np.float32)
        xn = np.zeros((3, 2, 2), dtype=np.float32)
        np.testing.assert_array_equal(D.image_mixup(xs, xn, m).numpy(), xn)

    def test_all_one_mask_is_source(self):
        m = D.CompositeMask(np.ones((2, 2), dtype=np.uint8), set(range(10)))
        xs = np.ones((3, 2, 2), dtype=np.float32)
        xn = np.zeros((3, 2, 2), dtype=np.float32)
        np.testing.assert_array_equal(D.image_mixup(xs, xn, m).numpy(), xs)

    def test_label_provenance_matches_image_provenance(self):
        rng = np.random.default_rng(0)
        ys = rng.integers(0, 10, size=(4, 4)).astype(np.uint8)
        yn = rng.integers(0, 10, size=(4, 4)).astype(np.uint8)
        m = D.CompositeMask(rng.integers(0, 2, size=(4, 4)).astype(np.uint8), set())
        out = D.label_mixup(ys, yn, m).numpy()
        sel = m.mask.astype(bool)
        np.testing.assert_array_equal(out[sel], ys[sel])
        np.testing.assert_array_equal(out[~sel], yn[~sel])

    def test_ignore_propagates_only_from_night(self):
        ys = np.zeros((2, 2), dtype=np.uint8)
        yn = np.full((2, 2), IGNORE, dtype=np.uint8)
        m0 = D.CompositeMask(np.zeros((2, 2), dtype=np.uint8), set())
        np.testing.assert_array_equal(D.label_mixup(ys, yn, m0).numpy(), yn)
        m1 = D.CompositeMask(np.ones((2, 2), dtype=np.uint8), set())
        out = D.label_mixup(ys, yn, m1).numpy()
        np.testing.assert_array_equal(out, ys)
        assert not (out == IGNORE).any()

    def test_shape_mismatch_errors(self):
        m = D.CompositeMask(np.zeros((2, 2), dtype=np.uint8), set())
        with pytest.raises(ValueError):
            D.image_mixup(np.zeros((3, 2, 2)), np.zeros((3, 3, 3)), m)


def make_sample(label, fill=0.5):
    from nightadapt.synthdata import DomainSample

    img = np.full((3,) + label.shape, fill, dtype=np.float32)
    return DomainSample(Tensor(img), Tensor(label.astype(np.uint8)), "source_day")


class TestBank:
    def test_fifo_eviction(self):
        bank = D.LongTailedBank(capacity=2, min_pixels=1)
        bus = 9
        for fill in (0.1, 0.2, 0.3):
            label = np.full((8, 8), bus, dtype=np.uint8)
            D.bank_push(bank, make_sample(label, fill), TAX)
        entries = bank.queues[bus]
        assert len(entries) == 2
        assert entries[0].image[0, 0, 0] == np.float32(0.2)
        assert entries[1].image[0, 0, 0] == np.float32(0.3)

    def test_no_rare_pixels_leaves_bank_unchanged(self):
        bank = D.LongTailedBank()
        label = np.zeros((8, 8), dtype=np.uint8)
        D.bank_push(bank, make_sample(label), TAX)
        assert len(bank) == 0

    def test_admission_threshold(self):
        bank = D.LongTailedBank(capacity=4, min_pixels=32)
        label = np.zeros((8, 8), dtype=np.uint8)
        label[:4, :4] = 9  # 16 bus pixels, below threshold
        D.bank_push(bank, make_sample(label), TAX)
        assert len(bank) == 0
        label[:4, :8] = 9  # 32 pixels, admitted
        D.bank_push(bank, make_sample(label), TAX)
        assert len(bank) == 1
        assert all(e.mask.sum() >= 32 for e in bank.entries())

    def test_randomized_push_sequences_fifo_property(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            cap = int(rng.integers(1, 5))
            bank = D.LongTailedBank(capacity=cap, min_pixels=1)
            n = int(rng.integers(0, 12))
            fills = rng.random(n)
            for fill in fills:
                label = np.full((4, 8), 9, dtype=np.uint8)
                D.bank_push(bank, make_sample(label, float(fill)), TAX)
            kept = [e.image[0, 0, 0] for e in bank.queues.get(9, [])]
            expected = [np.float32(f) for f in fills[max(0, n - cap) :]]
            assert kept == expected

    def test_apply_empty_bank_identity(self):
        bank = D.LongTailedBank()
        mixed = D.MixedSample(Tensor(np.zeros((3, 4, 4), dtype=np.float32)), Tensor(np.zeros((4, 4), dtype=np.uint8)))
        out = D.bank_apply(bank, mixed, np.random.default_rng(0), prob=1.0)
        assert out is mixed

    def test_apply_zero_mask_entry_identity_values(self):
        bank = D.LongTailedBank(capacity=1, min_pixels=1)
        entry = D.BankEntry(np.ones((3, 4, 4), dtype=np.float32), np.zeros((4, 4), dtype=np.uint8), np.full((4, 4), 9, dtype=np.uint8), 9)
        bank.queues[9] = __import__("collections").deque([entry])
        mixed = D.MixedSample(Tensor(np.zeros((3, 4, 4), dtype=np.float32)), Tensor(np.zeros((4, 4), dtype=np.uint8)))
        out = D.bank_apply(bank, mixed, np.random.default_rng(0), prob=1.0)
        np.testing.assert_array_equal(out.image.numpy(), mixed.image.numpy())
        np.testing.assert_array_equal(out.label.numpy(), mixed.label.numpy())

    def test_apply_pastes_under_mask_exactly(self):
        bank = D.LongTailedBank(capacity=1, min_pixels=1)
        label = np.zeros((4, 4), dtype=np.uint8)
        label[1:3, 1:3] = 9
        D.bank_push(bank, make_sample(label, 0.9), TAX)
        mixed = D.MixedSample(Tensor(np.zeros((3, 4, 4), dtype=np.float32)), Tensor(np.full((4, 4), 3, dtype=np.uint8)))
        out = D.bank_apply(bank, mixed, np.random.default_rng(1), prob=1.0)
        m = bank.entries()[0].mask.astype(bool)
        np.testing.assert_array_equal(out.image.numpy()[:, m], np.full((3, 4), 0.9, dtype=np.float32))
        np.testing.assert_array_equal(out.label.numpy()[m], np.full(4, 9, dtype=np.uint8))
        np.testing.assert_array_equal(out.label.numpy()[~m], np.full(12, 3, dtype=np.uint8))

    def test_apply_probability_gate(self):
        bank = D.LongTailedBank(capacity=1, min_pixels=1)
        label = np.full((4, 4), 9, dtype=np.uint8)
        D.bank_push(bank, make_sample(label, 0.9), TAX)
        mixed = D.MixedSample(Tensor(np.zeros((3, 4, 4), dtype=np.float32)), Tensor(np.zeros((4, 4), dtype=np.uint8)))
        rng = np.random.default_rng(5)
        applied = sum(D.bank_apply(bank, mixed, rng, prob=0.5) is not mixed for _ in range(400))
        assert 140 <= applied <= 260


class TestMixLoss:
    def test_perfect_prediction_near_zero(self):
        label = np.zeros((4, 4), dtype=np.uint8)
        logits = np.zeros((4, 4, 4), dtype=np.float32)
        logits[0] = 50.0
        loss = D.mix_loss(Tensor(logits), Tensor(label))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_prediction_ln4(self):
        label = np.zeros((4, 4), dtype=np.uint8)
        logits = np.zeros((4, 4, 4), dtype=np.float32)
        loss = D.mix_loss(Tensor(logits), Tensor(label))
        assert loss.item() == pytest.approx(np.log(4), rel=1e-6)

    def test_against_per_pixel_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 3, 3)).astype(np.float64)
        label = rng.integers(0, 5, size=(3, 3)).astype(np.uint8)
        label[0, 0] = IGNORE
        total, count = 0.0, 0
        for i in range(3):
            for j in range(3):
                if label[i, j] == IGNORE:
                    continue
                e = np.exp(logits[:, i, j] - logits[:, i, j].max())
                p = e / e.sum()
                total += -np.log(p[label[i, j]])
                count += 1
        loss = D.mix_loss(Tensor(logits), Tensor(label))
        assert abs(loss.item() - total / count) <= 1e-6

    def test_all_ignored_returns_zero_and_counts(self):
        L.reset_empty_loss_events()
        label = np.full((2, 2), IGNORE, dtype=np.uint8)
        loss = D.mix_loss(Tensor(np.zeros((4, 2, 2), dtype=np.float32)), Tensor(label))
        assert loss.item() == 0.0
        assert L.empty_loss_events() == 1

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(4, 2, 6))
        label = rng.integers(0, 4, size=(2, 6)).astype(np.uint8)
        base = D.mix_loss(Tensor(logits), Tensor(label)).item()
        perm = rng.permutation(12)
        logits_p = logits.reshape(4, -1)[:, perm].reshape(4, 2, 6)
        label_p = label.reshape(-1)[perm].reshape(2, 6)
        assert D.mix_loss(Tensor(logits_p), Tensor(label_p)).item() == pytest.approx(base, rel=1e-12)

    def test_decreases_when_correct_prob_rises(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(4, 3, 3))
        label = rng.integers(0, 4, size=(3, 3)).astype(np.uint8)
        base = D.mix_loss(Tensor(logits), Tensor(label)).item()
        bumped = logits.copy()
        bumped[label[1, 1], 1, 1] += 0.5
        assert D.mix_loss(Tensor(bumped), Tensor(label)).item() < base


class TestProvenance:
    def test_every_pixel_traces_to_exactly_one_origin(self):
        # disjoint value ranges let each pixel be attributed unambiguously
        for seed in range(100):
            rng = np.random.default_rng(seed)
            h = w = 8
            xs = rng.uniform(0.00, 0.30, size=(3, h, w)).astype(np.float32)
            xn = rng.uniform(0.35, 0.65, size=(3, h, w)).astype(np.float32)
            ys = rng.integers(0, 10, size=(h, w)).astype(np.uint8)
            yn = rng.integers(0, 10, size=(h, w)).astype(np.uint8)
            yn[rng.random((h, w)) < 0.2] = IGNORE

            m_c = D.composite_mask(ys, rng, TAX)
            mixed = D.MixedSample(D.image_mixup(xs, xn, m_c), D.label_mixup(ys, yn, m_c))

            bank = D.LongTailedBank(capacity=2, min_pixels=1)
            bank_label = np.zeros((h, w), dtype=np.uint8)
            bank_label[rng.integers(0, h), :] = 9
            bi = rng.uniform(0.70, 1.00, size=(3, h, w)).astype(np.float32)
            from nightadapt.synthdata import DomainSample

            D.bank_push(bank, DomainSample(Tensor(bi), Tensor(bank_label), "source_day"), TAX)
            out = D.bank_apply(bank, mixed, rng, prob=0.7)

            img, lab = out.image.numpy(), out.label.numpy()
            entry = bank.entries()[0]
            for i in range(h):
                for j in range(w):
                    v = img[0, i, j]
                    origins = []
                    if v == xs[0, i, j]:
                        origins.append(("source", ys[i, j]))
                    if v == xn[0, i, j]:
                        origins.append(("night", yn[i, j]))
                    if out is not mixed and v == entry.image[0, i, j]:
                        origins.append(("bank", entry.label[i, j]))
                    assert len(origins) == 1, (i, j, v, origins)
                    assert lab[i, j] == origins[0][1]

    def test_dynamic_small_guarantee(self):
        # every dynamic-and-small pixel of the day label lands in the mix
        # with its source appearance unless a bank paste covers it with a
        # rare-class pixel
        for seed in range(30):
            rng = np.random.default_rng(1000 + seed)
            ys = rng.integers(0, 10, size=(8, 8)).astype(np.uint8)
            xs = rng.uniform(0.0, 0.3, size=(3, 8, 8)).astype(np.float32)
            xn = rng.uniform(0.4, 0.7, size=(3, 8, 8)).astype(np.float32)
            yn = rng.integers(0, 10, size=(8, 8)).astype(np.uint8)
            m_c = D.composite_mask(ys, rng, TAX)
            mixed = D.MixedSample(D.image_mixup(xs, xn, m_c), D.label_mixup(ys, yn, m_c))
            dyn = np.isin(ys, sorted(TAX.dynamic_small_ids))
            np.testing.assert_array_equal(mixed.image.numpy()[:, dyn], xs[:, dyn])
            np.testing.assert_array_equal(mixed.label.numpy()[dyn], ys[dyn])
