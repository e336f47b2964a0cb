import numpy as np
import pytest

from dualmil.domain import iom
from dualmil.evaluation import auroc, score_bags, task_arrays
from dualmil.synthdata import (DatasetParseError, GenConfig, GenerationError, apply_full_ratio,
                               class_counts, class_means, dumps_dataset, generate, loads_dataset,
                               read_dataset, write_dataset)
from dualmil.training import TrainConfig, train


def small(**kw):
    cfg = dict(n_images=12, image_width=448, image_height=672, feature_dim=6, seed=4)
    cfg.update(kw)
    return GenConfig(**cfg)


class TestGenerate:
    def test_default_grid_has_77_regions(self):
        bags = generate(GenConfig(n_images=2, feature_dim=4))
        assert all(b.m == 77 for b in bags)

    def test_pure_normal(self):
        bags = generate(small(class_mix=(1, 0, 0, 0)))
        assert all(tuple(b.weak_label) == (0, 0) and not b.annotations for b in bags)

    def test_full_ratio_one(self):
        bags = generate(small(n_images=40, full_ratio=1.0))
        assert any(b.weak_label.y_M for b in bags)
        for b in bags:
            assert (b.supervision == "full") == bool(b.weak_label.y_M)

    def test_weak_label_consistency(self):
        for b in generate(small(n_images=60)):
            assert b.weak_label.y_M == int(bool(b.lesions("M")))
            assert b.weak_label.y_B == int(bool(b.lesions("B")))
            assert 0 <= len(b.lesions("M")) <= 3 and 0 <= len(b.lesions("B")) <= 3

    def test_every_lesion_covered(self):
        for b in generate(small(n_images=60)):
            for a in b.annotations:
                assert max(iom(g.rect, a.box) for g in b.geometry) >= 0.5

    def test_lesion_regions_shifted(self):
        cfg = small(n_images=40, separation=50.0)
        mu = class_means(cfg.feature_dim, cfg.separation)
        for b in generate(cfg):
            for g, x in zip(b.geometry, b.features):
                hit = {a.cls for a in b.annotations if iom(g.rect, a.box) >= 0.5}
                expect = "M" if "M" in hit else "B" if hit else "N"
                assert np.argmin([np.linalg.norm(x - mu[c]) for c in "NBM"]) == "NBM".index(expect)

    def test_separation_is_mean_distance(self):
        mu = class_means(8, 1.5)
        assert np.linalg.norm(mu["M"] - mu["N"]) == pytest.approx(1.5)
        assert np.linalg.norm(mu["B"] - mu["N"]) == pytest.approx(1.5)
        assert mu["M"] @ mu["B"] == 0

    def test_deterministic_bytes(self):
        assert dumps_dataset(generate(small())) == dumps_dataset(generate(small()))
        assert dumps_dataset(generate(small())) != dumps_dataset(generate(small(seed=5)))

    def test_infeasible_placement(self):
        with pytest.raises(GenerationError):
            generate(small(class_mix=(0, 0, 1, 0), max_retries=0))

    @pytest.mark.parametrize("bad", [dict(class_mix=(0.5, 0.5, 0.5, 0)), dict(separation=-1),
                                     dict(lesion_size_range=(10, 5000)), dict(full_ratio=1.5)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            small(**bad)

    def test_class_counts(self):
        counts = class_counts(generate(small(n_images=200)))
        assert sum(counts.values()) == 200 and all(v > 20 for v in counts.values())


class TestFullRatio:
    def test_half(self):
        bags = generate(small(n_images=80))
        n_m = sum(1 for b in bags if b.weak_label.y_M)
        tagged = apply_full_ratio(bags, 0.5, seed=0)
        n_full = sum(1 for b in tagged if b.supervision == "full")
        assert n_full == int(np.floor(0.5 * n_m + 0.5))

    def test_nested(self):
        bags = generate(small(n_images=80))
        sets = [{b.image_id for b in apply_full_ratio(bags, r, 3) if b.supervision == "full"}
                for r in (0.0, 0.25, 0.5, 0.75, 1.0)]
        for a, b in zip(sets, sets[1:]):
            assert a <= b

    def test_annotations_kept(self):
        bags = generate(small(n_images=30))
        for a, b in zip(bags, apply_full_ratio(bags, 1.0, 0)):
            assert a.annotations == b.annotations and a.features is b.features


class TestFormat:
    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "e.txt"
        write_dataset([], path, feature_dim=6)
        assert path.read_text() == "DMILDS v1 6 224 112\n"
        assert read_dataset(path) == []

    def test_round_trip_exact(self, tmp_path):
        bags = generate(small(n_images=3, class_mix=(0, 0, 0, 1), full_ratio=1.0))
        path = tmp_path / "d.txt"
        write_dataset(bags, path)
        back = read_dataset(path)
        assert len(back) == 3
        for a, b in zip(bags, back):
            assert a.image_id == b.image_id and a.weak_label == b.weak_label
            assert a.supervision == b.supervision and a.annotations == b.annotations
            assert a.features.tobytes() == b.features.tobytes()
            assert [g.rect for g in a.geometry] == [g.rect for g in b.geometry]
        assert dumps_dataset(back) == path.read_text()

    def test_mixed_rewrite_identical(self):
        text = dumps_dataset(generate(small(n_images=3, class_mix=(0.25, 0.25, 0.25, 0.25))))
        assert dumps_dataset(loads_dataset(text)) == text

    def test_truncated_row_names_image(self):
        text = dumps_dataset(generate(small(n_images=2)))
        lines = text.splitlines()
        lines[-1] = " ".join(lines[-1].split()[:-1])
        with pytest.raises(DatasetParseError, match="img00001") as err:
            loads_dataset("\n".join(lines) + "\n")
        assert err.value.line_no == len(lines)

    def test_truncated_file(self):
        text = dumps_dataset(generate(small(n_images=1)))
        with pytest.raises(DatasetParseError, match="img00000"):
            loads_dataset("\n".join(text.splitlines()[:-3]))

    @pytest.mark.parametrize("text", ["", "NOPE v1 4 224 112\n", "DMILDS v1 4 224 112\nIMG x 1\n",
                                      "DMILDS v1 2 224 112\nIMG a 1 1 1 0 weak\nLES Q 0 0 1 1\n0 0\n"])
    def test_malformed(self, text):
        with pytest.raises(DatasetParseError):
            loads_dataset(text)


def test_zero_separation_is_chance():
    train_bags = generate(GenConfig(n_images=100, separation=0.0, feature_dim=16, seed=1))
    test_bags = generate(GenConfig(n_images=500, separation=0.0, feature_dim=16, seed=2))
    res = train(train_bags, TrainConfig(epochs=5, batch_size=16, lr=1e-3, hidden_dim=32))
    s, y = task_arrays(score_bags(test_bags, res.params), "MvsBN")
    assert 0.4 <= auroc(s, y) <= 0.6
