"""Training-loop tests: loss assembly, pseudo-label thresholding, the
alternating min-max updates, the round schedule, and resume determinism."""

import copy
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from roadadapt import dataio, scenegen, trainer
from roadadapt.dataio import PseudoLabelRecord, TrainConfig
from roadadapt.errors import ConfigError, NumericError, StateError
from roadadapt.networks import SegOutput, build_model

torch.set_num_threads(1)


def seg_output(logits: torch.Tensor) -> SegOutput:
    return SegOutput(logits=logits, probs=torch.softmax(logits, dim=1))


def logits_for(fg: float, bg: float, shape=(1, 1, 1)) -> torch.Tensor:
    n, h, w = shape
    logits = torch.zeros(n, 2, h, w, dtype=torch.float64)
    logits[:, 0] = bg
    logits[:, 1] = fg
    return logits


# ---------------------------------------------------------------------------
# seg_loss


class TestSegLoss:
    def test_equal_logits_give_log_two(self):
        logits = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
        target = torch.ones(2, 3, 3, dtype=torch.long)
        loss = trainer.seg_loss(seg_output(logits), target)
        assert abs(float(loss) - math.log(2.0)) < 1e-12

    def test_hand_computed_cross_entropy(self):
        # One pixel, logits (bg, fg) = (0, 2), true label fg:
        # loss = -log(e^2 / (1 + e^2)) = log(1 + e^-2).
        logits = logits_for(fg=2.0, bg=0.0)
        target = torch.ones(1, 1, 1, dtype=torch.long)
        loss = trainer.seg_loss(seg_output(logits), target)
        assert abs(float(loss) - math.log(1.0 + math.exp(-2.0))) < 1e-12

    def test_wrong_label_is_penalized_more(self):
        logits = logits_for(fg=2.0, bg=0.0)
        right = trainer.seg_loss(seg_output(logits), torch.ones(1, 1, 1, dtype=torch.long))
        wrong = trainer.seg_loss(seg_output(logits), torch.zeros(1, 1, 1, dtype=torch.long))
        assert float(wrong) > float(right)

    def test_ignored_pixels_are_excluded(self):
        logits = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        logits[0, 1, 0, 0] = 3.0  # pixel 0 confident fg
        logits[0, 1, 0, 1] = -5.0  # pixel 1 would add a huge loss if counted
        target = torch.tensor([[[1, -1]]], dtype=torch.long)
        loss = trainer.seg_loss(seg_output(logits), target)
        only_first = trainer.seg_loss(
            seg_output(logits[:, :, :, :1]), target[:, :, :1]
        )
        assert abs(float(loss) - float(only_first)) < 1e-12

    def test_all_ignored_gives_zero_with_graph(self):
        logits = torch.randn(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        target = torch.full((1, 2, 2), -1, dtype=torch.long)
        loss = trainer.seg_loss(seg_output(logits), target)
        assert float(loss.detach()) == 0.0
        assert loss.grad_fn is not None
        loss.backward()
        assert torch.all(logits.grad == 0)

    def test_label_validation(self):
        logits = torch.zeros(1, 2, 2, 2)
        with pytest.raises(ConfigError):
            trainer.seg_loss(seg_output(logits), torch.zeros(1, 2, 3, dtype=torch.long))
        with pytest.raises(ConfigError):
            trainer.seg_loss(seg_output(logits), torch.zeros(1, 2, 2, dtype=torch.int32))
        with pytest.raises(ConfigError):
            trainer.seg_loss(seg_output(logits), torch.full((1, 2, 2), 2, dtype=torch.long))


# ---------------------------------------------------------------------------
# pseudo labels


class TestMakePseudoLabels:
    @pytest.mark.parametrize("alpha", [0.6, 0.9, 0.99])
    @given(data=st.data())
    @settings(max_examples=25, deadline=None)
    def test_partition_matches_interval_rule(self, alpha, data):
        prob = data.draw(
            st.lists(
                st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=16
            ).map(lambda xs: np.asarray(xs[: len(xs) // 2 * 2]).reshape(2, -1))
        )
        record = trainer.make_pseudo_labels(prob, alpha, round_index=2)
        fg = record.label == 1
        bg = (record.label == 0) & ~record.ignore
        assert np.array_equal(fg, prob >= alpha)
        assert np.array_equal(bg, prob <= 1.0 - alpha)
        assert np.array_equal(record.ignore, (prob > 1.0 - alpha) & (prob < alpha))
        # the three sets tile the image exactly
        assert np.all(fg.astype(int) + bg.astype(int) + record.ignore.astype(int) == 1)

    def test_alpha_half_has_no_ignores(self):
        prob = np.linspace(0.0, 1.0, 16).reshape(4, 4)
        record = trainer.make_pseudo_labels(prob, 0.5, round_index=2)
        assert not record.ignore.any()
        assert np.array_equal(record.label == 1, prob >= 0.5)

    def test_boundary_values_are_kept(self):
        prob = np.array([[0.99, 0.01], [0.5, 0.98999]])
        record = trainer.make_pseudo_labels(prob, 0.99, round_index=2)
        assert record.label[0, 0] == 1 and not record.ignore[0, 0]
        assert record.label[0, 1] == 0 and not record.ignore[0, 1]
        assert record.ignore[1, 0] and record.ignore[1, 1]

    def test_round_and_alpha_recorded(self):
        record = trainer.make_pseudo_labels(np.full((2, 2), 0.7), 0.6, round_index=3)
        assert record.round_index == 3 and record.alpha == 0.6

    def test_rejects_bad_inputs(self):
        with pytest.raises(ConfigError):
            trainer.make_pseudo_labels(np.zeros(4), 0.9, 2)
        with pytest.raises(NumericError):
            trainer.make_pseudo_labels(np.full((2, 2), np.nan), 0.9, 2)
        with pytest.raises(NumericError):
            trainer.make_pseudo_labels(np.full((2, 2), 1.5), 0.9, 2)
        with pytest.raises(ConfigError):
            trainer.make_pseudo_labels(np.zeros((2, 2)), 0.4, 2)


class TestMergePseudoStore:
    def _split(self, ids):
        n = len(ids)
        return trainer.LoadedSplit(
            ids=list(ids), rgb=torch.zeros(n, 3, 4, 4), sn=None, label=None
        )

    def test_ignore_becomes_minus_one(self):
        label = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        ignore = np.array([[False, True], [False, False]])
        store = {"a": PseudoLabelRecord(label=label, ignore=ignore, round_index=2, alpha=0.9)}
        merged = trainer.merge_pseudo_store(self._split(["a"]), store)
        assert merged.shape == (1, 2, 2)
        assert merged[0, 0, 0] == 1 and merged[0, 0, 1] == -1
        assert merged[0, 1, 0] == 0 and merged[0, 1, 1] == 1

    def test_missing_sample_raises(self):
        with pytest.raises(StateError, match="missing"):
            trainer.merge_pseudo_store(self._split(["a", "b"]), {})


# ---------------------------------------------------------------------------
# loss assembly


class TestTotalLoss:
    def test_round1_reference_value(self):
        cfg = TrainConfig()
        breakdown = trainer.total_loss(
            1, cfg, main_source=1.0, rgb_aux_source=1.0, sn_aux_source=1.0, adversarial=1.0
        )
        assert abs(float(breakdown.total) - 2.0001) < 1e-6

    def test_round2_reference_value(self):
        cfg = TrainConfig()
        breakdown = trainer.total_loss(
            2,
            cfg,
            main_source=1.0,
            rgb_aux_source=1.0,
            sn_aux_source=1.0,
            main_target=1.0,
            rgb_aux_target=1.0,
            sn_aux_target=1.0,
            adversarial=1.0,
        )
        assert abs(float(breakdown.total) - 2.9001) < 1e-6

    def test_absent_terms_are_skipped(self):
        breakdown = trainer.total_loss(1, TrainConfig(), main_source=2.0)
        assert float(breakdown.total) == pytest.approx(2.0)
        assert breakdown.rgb_aux_source is None and breakdown.adversarial is None

    def test_target_terms_forbidden_in_round1(self):
        with pytest.raises(StateError):
            trainer.total_loss(1, TrainConfig(), main_source=1.0, main_target=1.0)

    def test_round_must_be_positive(self):
        with pytest.raises(ConfigError):
            trainer.total_loss(0, TrainConfig(), main_source=1.0)

    def test_scalars_detach_tensors(self):
        value = torch.tensor(3.0, requires_grad=True) * 2
        breakdown = trainer.total_loss(1, TrainConfig(), main_source=value)
        scalars = breakdown.scalars()
        assert scalars["main_source"] == pytest.approx(6.0)
        assert scalars["total"] == pytest.approx(6.0)


# ---------------------------------------------------------------------------
# optimization helpers


class TestPolyLr:
    def test_closed_form(self):
        assert trainer.poly_lr(0.1, 0, 100, 0.9) == pytest.approx(0.1)
        assert trainer.poly_lr(0.1, 50, 100, 0.9) == pytest.approx(0.1 * 0.5**0.9)
        assert trainer.poly_lr(0.1, 100, 100, 0.9) == pytest.approx(0.0)

    def test_step_past_total_clamps(self):
        assert trainer.poly_lr(0.1, 250, 100, 0.9) == 0.0


class TestDownsampleLabels:
    def test_same_size_is_identity(self):
        label = torch.randint(-1, 2, (2, 8, 8))
        assert trainer.downsample_labels(label, (8, 8)) is label

    def test_nearest_preserves_ignore(self):
        label = torch.full((1, 4, 4), -1, dtype=torch.long)
        label[0, :2, :2] = 1
        small = trainer.downsample_labels(label, (2, 2))
        assert small.dtype == torch.long
        assert small[0, 0, 0] == 1
        assert small[0, 1, 1] == -1

    def test_block_constant_exact(self):
        label = torch.tensor([[[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]])
        small = trainer.downsample_labels(label, (2, 2))
        assert torch.equal(small, torch.tensor([[[0, 1], [1, 0]]]))


# ---------------------------------------------------------------------------
# alternating updates

SIZE = (2, 3, 32, 32)


def synthetic_batch(seed: int, labeled: bool, size=SIZE) -> trainer.Batch:
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand(size, generator=g)
    sn = torch.rand(size, generator=g)
    label = None
    if labeled:
        label = (torch.rand(size[0], *size[2:], generator=g) > 0.5).long()
    return trainer.Batch(rgb=rgb, sn=sn, label=label)


def flat_generator_params(model) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1).clone() for p in model.generator_parameters()])


def flat_disc_params(model) -> torch.Tensor:
    return torch.cat(
        [
            p.detach().reshape(-1).clone()
            for disc in model.discriminators.values()
            for p in disc.parameters()
        ]
    )


class TestAlternateStep:
    def make_state(self, **overrides) -> trainer.TrainState:
        cfg = TrainConfig(data_root="unused", **overrides)
        torch.manual_seed(0)
        model = build_model(cfg)
        return trainer.make_state(cfg, model, total_steps=100)

    def test_generator_matches_sfa_off_when_adversarial_is_inert(self):
        # lambda.4 = 0 plus a frozen discriminator must reproduce the
        # sfa-disabled generator trajectory bit for bit.
        state_off = self.make_state(sfa_enabled=False)
        state_inert = self.make_state(sfa_enabled=True, lambda_4=0.0, lr_disc=0.0)
        for step in range(3):
            bs = synthetic_batch(10 + step, labeled=True)
            bt = synthetic_batch(90 + step, labeled=False)
            trainer.alternate_step(state_off, copy.deepcopy(bs), copy.deepcopy(bt))
            trainer.alternate_step(state_inert, copy.deepcopy(bs), copy.deepcopy(bt))
        assert torch.equal(
            flat_generator_params(state_off.model), flat_generator_params(state_inert.model)
        )

    def test_discriminator_frozen_during_generator_step(self):
        state = self.make_state(lr_disc=0.0)
        before = flat_disc_params(state.model)
        for step in range(2):
            trainer.alternate_step(
                state, synthetic_batch(step, labeled=True), synthetic_batch(50 + step, False)
            )
        assert torch.equal(before, flat_disc_params(state.model))

    def test_generator_frozen_when_its_lr_is_zero(self):
        state = self.make_state(lr_seg=0.0, momentum=0.0, weight_decay=0.0)
        gen_before = flat_generator_params(state.model)
        disc_before = flat_disc_params(state.model)
        trainer.alternate_step(state, synthetic_batch(0, True), synthetic_batch(1, False))
        assert torch.equal(gen_before, flat_generator_params(state.model))
        assert not torch.equal(disc_before, flat_disc_params(state.model))

    def test_discriminator_step_increases_objective(self):
        # With the generator frozen the discriminator sees a fixed feature
        # distribution, so a few updates must raise the domain objective.
        state = self.make_state(lr_seg=0.0, momentum=0.0, weight_decay=0.0)
        bs = synthetic_batch(3, labeled=True)
        bt = synthetic_batch(4, labeled=False)

        def objective() -> float:
            model = state.model
            model.eval()
            with torch.no_grad():
                out_s = model(bs.rgb, bs.sn)
                out_t = model(bt.rgb, bt.sn)
                sel_s = trainer._aligned_features(out_s, "rgb", 0, state.cfg, detach=True)
                sel_t = trainer._aligned_features(out_t, "rgb", 0, state.cfg, detach=True)
                disc = model.discriminators["rgb"]
                return float(trainer.adversarial_objective(disc(sel_s), disc(sel_t)))

        before = objective()
        for _ in range(5):
            trainer.alternate_step(state, bs, bt)
        assert objective() > before

    def test_source_batch_requires_labels(self):
        state = self.make_state()
        with pytest.raises(StateError):
            trainer.alternate_step(state, synthetic_batch(0, False), synthetic_batch(1, False))

    def test_round_two_requires_target_labels(self):
        state = self.make_state()
        state.round_index = 2
        with pytest.raises(StateError):
            trainer.alternate_step(state, synthetic_batch(0, True), synthetic_batch(1, False))

    def test_loss_breakdown_reports_expected_terms(self):
        state = self.make_state()
        breakdown, disc_value = trainer.alternate_step(
            state, synthetic_batch(0, True), synthetic_batch(1, False)
        )
        scalars = breakdown.scalars()
        for key in ("main_source", "rgb_aux_source", "sn_aux_source", "adversarial", "total"):
            assert key in scalars
        assert "main_target" not in scalars
        assert disc_value is not None

    def test_sfa_both_sums_modalities(self):
        state = self.make_state(sfa_modalities="both")
        breakdown, disc_value = trainer.alternate_step(
            state, synthetic_batch(0, True), synthetic_batch(1, False)
        )
        assert breakdown.adversarial is not None
        assert disc_value is not None
        assert set(state.model.discriminators) == {"rgb", "sn"}


# ---------------------------------------------------------------------------
# the round schedule on a generated micro-benchmark


def micro_benchmark(root: Path, seed: int = 7) -> Path:
    bench = scenegen.default_benchmark_config(seed=seed)
    bench["counts"] = {"source-train": 8, "target-train": 8, "target-eval": 4}
    bench["source"]["height"] = bench["source"]["width"] = 32
    bench["target"]["height"] = bench["target"]["width"] = 32
    scenegen.generate_benchmark(bench, root, write_sn=True)
    return root


def run_config(data_root: Path, **overrides) -> TrainConfig:
    base = dict(
        data_root=str(data_root),
        rounds=2,
        epochs_per_round=2,
        batch_size=4,
        seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory) -> Path:
    return micro_benchmark(tmp_path_factory.mktemp("bench") / "data")


@pytest.fixture(scope="module")
def finished_run(bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    cfg = run_config(bench_dir)
    results = trainer.run_rounds(cfg, out)
    return cfg, out, results


def read_log(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestRunRounds:
    def test_round_schedule_contract(self, finished_run):
        cfg, out, results = finished_run
        records = read_log(out / "metrics.jsonl")
        train = [r for r in records if r["event"] == "train"]
        evals = [r for r in records if r["event"] == "eval"]
        assert [r.round_index for r in results] == [1, 2]
        assert len(train) == cfg.rounds * cfg.epochs_per_round
        assert len(evals) == cfg.rounds

        for record in train:
            has_target = "main_target" in record["losses"]
            assert has_target == (record["round"] >= 2)
            assert "discriminator" in record["losses"]

        for round_index in (1, 2):
            assert trainer.checkpoint_path(out, round_index).is_file()
        assert dataio.pseudo_dir(out, 2).is_dir()

    def test_config_echo_is_loadable_and_exact(self, finished_run):
        cfg, out, _ = finished_run
        echoed = json.loads((out / "config.json").read_text())
        assert echoed == dataio.config_to_dotted(cfg)
        assert dataio.config_to_dotted(dataio.config_from_dotted(echoed)) == echoed

    def test_target_train_labels_are_withheld(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "target-train")
        assert layout.labels_withheld
        assert not (bench_dir / "target-train" / dataio.LABEL_DIR).exists()

    def test_checkpoint_roundtrip(self, finished_run):
        cfg, out, _ = finished_run
        model, loaded_cfg, payload = trainer.model_from_checkpoint(
            trainer.checkpoint_path(out, 2)
        )
        assert dataio.config_to_dotted(loaded_cfg) == dataio.config_to_dotted(cfg)
        assert payload["round"] == 2
        raw = trainer.load_checkpoint(trainer.checkpoint_path(out, 2))
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, raw["model"][name])

    def test_rerun_is_bit_identical(self, finished_run, tmp_path):
        cfg, out, _ = finished_run
        rerun_cfg = dataio.config_from_dotted(dataio.config_to_dotted(cfg))
        trainer.run_rounds(rerun_cfg, tmp_path / "rerun")
        assert (tmp_path / "rerun" / "metrics.jsonl").read_bytes() == (
            out / "metrics.jsonl"
        ).read_bytes()

    def test_resume_continues_exact_trajectory(self, finished_run, tmp_path):
        cfg, out, _ = finished_run
        resumed = tmp_path / "resumed"
        resumed.mkdir()
        # give the resumed run the pseudo store round 2 consumes
        shutil.copytree(dataio.pseudo_dir(out, 2), dataio.pseudo_dir(resumed, 2))
        cfg2 = dataio.config_from_dotted(dataio.config_to_dotted(cfg))
        trainer.run_rounds(cfg2, resumed, resume=trainer.checkpoint_path(out, 1))

        full_log = read_log(out / "metrics.jsonl")
        round2 = [json.dumps(r, sort_keys=True) for r in full_log if r.get("round") == 2]
        resumed_log = [
            json.dumps(r, sort_keys=True) for r in read_log(resumed / "metrics.jsonl")
        ]
        assert resumed_log == round2

        final_a = trainer.load_checkpoint(trainer.checkpoint_path(out, 2))["model"]
        final_b = trainer.load_checkpoint(trainer.checkpoint_path(resumed, 2))["model"]
        assert set(final_a) == set(final_b)
        for name in final_a:
            assert torch.equal(final_a[name], final_b[name])

    def test_resume_rejects_config_mismatch(self, finished_run, tmp_path):
        cfg, out, _ = finished_run
        other = run_config(Path(cfg.data_root), alpha=0.95)
        with pytest.raises(ConfigError, match="config"):
            trainer.run_rounds(other, tmp_path / "x", resume=trainer.checkpoint_path(out, 1))

    def test_resume_without_pseudo_store_raises(self, finished_run, tmp_path):
        cfg, out, _ = finished_run
        cfg2 = dataio.config_from_dotted(dataio.config_to_dotted(cfg))
        with pytest.raises(StateError, match="pseudo"):
            trainer.run_rounds(
                cfg2, tmp_path / "no-store", resume=trainer.checkpoint_path(out, 1)
            )

    def test_missing_data_root_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError, match="data.root"):
            trainer.run_rounds(cfg, Path("/tmp/unused-out"))


# ---------------------------------------------------------------------------
# evaluation plumbing


class TestEvaluate:
    def test_scores_shape_and_maxf_bound(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "target-eval")
        split = trainer.load_split(layout, need_normals=True, want_label=True)
        cfg = TrainConfig(data_root=str(bench_dir))
        torch.manual_seed(0)
        model = build_model(cfg)
        scores = trainer.evaluate(model, split)
        assert set(scores) == {"PRE", "REC", "F1", "IoU", "MaxF"}
        assert scores["MaxF"] >= scores["F1"] - 1e-12
        for value in scores.values():
            assert 0.0 <= value <= 1.0

    def test_evaluate_requires_labels(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "target-train")
        split = trainer.load_split(layout, need_normals=True, want_label=False)
        cfg = TrainConfig(data_root=str(bench_dir))
        model = build_model(cfg)
        with pytest.raises(StateError):
            trainer.evaluate(model, split)

    def test_predict_probs_are_probabilities(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "target-eval")
        split = trainer.load_split(layout, need_normals=True, want_label=True)
        cfg = TrainConfig(data_root=str(bench_dir))
        model = build_model(cfg)
        probs = trainer.predict_probs(model, split, batch_size=3)
        assert probs.shape == (len(split), *split.image_size)
        assert probs.min() >= 0.0 and probs.max() <= 1.0


class TestLoadSplit:
    def test_shapes_and_ranges(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "source-train")
        split = trainer.load_split(layout, need_normals=True, want_label=True)
        assert split.rgb.shape == (8, 3, 32, 32)
        assert split.rgb.dtype == torch.float32
        assert float(split.rgb.min()) >= 0.0 and float(split.rgb.max()) <= 1.0
        assert split.sn.shape == (8, 3, 32, 32)
        assert split.label.shape == (8, 32, 32)
        assert split.image_size == (32, 32)

    def test_take_batch_selects_rows(self, bench_dir):
        layout = dataio.DatasetLayout.open(bench_dir / "source-train")
        split = trainer.load_split(layout, need_normals=True, want_label=True)
        batch = trainer.take_batch(split, np.array([3, 0]), split.label)
        assert torch.equal(batch.rgb[0], split.rgb[3])
        assert torch.equal(batch.rgb[1], split.rgb[0])
        assert torch.equal(batch.label[0], split.label[3])
