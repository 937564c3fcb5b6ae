from pathlib import Path

import numpy as np
import pytest
import yaml

from backend.codec.latent import ToyCodec
from backend.core.ablation import CURVES, SUMMARY, run_ablation
from backend.core.command_handler import CODEC_REPORT, VERIFY_REPORT, CommandHandler
from backend.core.dataset import ClipRecord, load_clips, synth_clips
from backend.core.probes import brightest_centroid, controllability_probe, region_contrast
from backend.core.registry import PropertyRegistry
from backend.core.sampler import LATENT_DUMP, MANIFEST, frame_name, generate, load_trained_model, run_sample
from backend.core.trainer import LATEST, SP_TRACE, TRAIN_LOG, VALIDATION_LOG, Trainer
from backend.flow.rectified import SamplerConfig
from backend.models.mvdit import build_model
from backend.parallel.buckets import BucketSpec, StagePlan
from backend.scene.serialize import dump_scene
from backend.scene.synth import synth_scene
from backend.services.config import DataConfig, RunConfig, from_dict, load_config, merge
from backend.services.storage import CheckpointError, OutputDir, latent_from_bytes, load_checkpoint, read_jsonl, split_checkpoint
from main import main


def tiny_run_config(output, steps=4, frames=1, **sections) -> RunConfig:
    doc = {
        "model": {"depth": 2, "control_depth": 1, "width": 16, "heads": 2, "patch": 1, "mlp_ratio": 2, "frequency_dim": 8},
        "codec": {"latent_channels": 4},
        "data": {"clips": 2, "views": 2, "validation_clips": 1},
        "stages": [{"stage": 1, "buckets": [{"height": 32, "width": 56, "frames": frames}], "steps": steps}],
        "train": {"lr": 1.0e-3, "warmup_steps": 1, "checkpoint_every": 2, "validate_every": 2},
        "sampler": {"steps": 2},
        "output_dir": str(output),
    }
    return from_dict(RunConfig, merge(doc, sections))


def final_params(path):
    _, entries = load_checkpoint(path)
    return split_checkpoint(entries)[0]


# Dataset


def test_synth_clips_cycle_through_buckets():
    stage = StagePlan(stage=2, buckets=[BucketSpec(32, 56, 1), BucketSpec(32, 56, 9)], steps=1)
    clips = synth_clips(DataConfig(clips=3, views=1), stage, ToyCodec(), data_seed=0)
    assert [c.key for c in clips] == [(32, 56, 1), (32, 56, 9), (32, 56, 1)]
    assert clips[1].latent.shape == (3, 1, 4, 7, 16)


def test_scene_directory_keeps_matching_shapes(tmp_path):
    dump_scene(synth_scene(0, 1, 1), str(tmp_path / "a.yaml"))
    dump_scene(synth_scene(1, 9, 1), str(tmp_path / "b.yaml"))
    data = DataConfig(source="scenes", scene_dir=str(tmp_path))
    clips = load_clips(data, StagePlan(stage=1, buckets=[BucketSpec(32, 56, 9)], steps=1), ToyCodec(), 0)
    assert len(clips) == 1 and isinstance(clips[0], ClipRecord) and clips[0].key == (32, 56, 9)
    with pytest.raises(ValueError):
        load_clips(data, StagePlan(stage=1, buckets=[BucketSpec(32, 56, 17)], steps=1), ToyCodec(), 0)


# Training


def test_zero_steps_checkpoint_equals_initialization(output_dir):
    config = tiny_run_config(output_dir, steps=0)
    result = Trainer(config, OutputDir(str(output_dir))).run()
    assert result.step == 0 and result.losses == []
    fresh = build_model(config.model, config.codec.latent_channels, config.seeds.model, conditions=config.conditions)
    saved = final_params(result.checkpoint)
    assert sorted(saved) == sorted(fresh.state_dict())
    for name, value in fresh.state_dict().items():
        np.testing.assert_array_equal(saved[name], value, err_msg=name)


def test_training_writes_logs_and_checkpoints(output_dir):
    config = tiny_run_config(output_dir, steps=4)
    result = Trainer(config, OutputDir(str(output_dir))).run()
    assert result.step == 4 and len(result.losses) == 4
    assert all(np.isfinite(result.losses))
    assert [r["step"] for r in read_jsonl(str(output_dir / TRAIN_LOG))] == [1, 2, 3, 4]
    assert [r["step"] for r in read_jsonl(str(output_dir / VALIDATION_LOG))] == [2, 4]
    assert (output_dir / "checkpoints" / "step_000002.ckpt").exists()
    assert (output_dir / "checkpoints" / LATEST).exists()


def test_sequence_parallel_stage_writes_its_trace(output_dir):
    stages = [{"stage": 2, "buckets": [{"height": 32, "width": 56, "frames": 1}], "steps": 2, "sp_size": 2}]
    config = tiny_run_config(output_dir, stages=stages)
    Trainer(config, OutputDir(str(output_dir))).run()
    records = read_jsonl(str(output_dir / SP_TRACE))
    assert records and len(records) % 8 == 0
    assert {r["iteration"] for r in records} == {1, 2}
    assert {r["phase"] for r in records} == {"q:S->HD", "k:S->HD", "v:S->HD", "o:HD->S"}
    assert all(r["worker"] != r["peer"] and r["bytes"] > 0 for r in records)


def test_resume_matches_uninterrupted_run(output_dir):
    full = Trainer(tiny_run_config(output_dir / "full", steps=4), OutputDir(str(output_dir / "full"))).run()
    half = Trainer(tiny_run_config(output_dir / "half", steps=2), OutputDir(str(output_dir / "half"))).run()
    resumed = Trainer(tiny_run_config(output_dir / "resumed", steps=4), OutputDir(str(output_dir / "resumed"))).run(
        resume=half.checkpoint
    )
    assert resumed.step == 4
    expected, got = final_params(full.checkpoint), final_params(resumed.checkpoint)
    for name in expected:
        np.testing.assert_array_equal(got[name], expected[name], err_msg=name)


def test_resume_rejects_a_different_model(output_dir):
    saved = Trainer(tiny_run_config(output_dir / "a", steps=0), OutputDir(str(output_dir / "a"))).run()
    wider = tiny_run_config(output_dir / "b", steps=0, model={"width": 32})
    with pytest.raises(CheckpointError):
        Trainer(wider, OutputDir(str(output_dir / "b"))).resume(saved.checkpoint)


# Sampling


def test_sample_writes_one_frame_per_view_and_step(output_dir):
    config = tiny_run_config(output_dir, steps=0)
    checkpoint = Trainer(config, OutputDir(str(output_dir))).run().checkpoint
    scene = synth_scene(0, 17, 2)
    first = run_sample(config, checkpoint, scene, OutputDir(str(output_dir / "a")), seed=3)
    second = run_sample(config, checkpoint, scene, OutputDir(str(output_dir / "b")), seed=3)
    assert len(first.files) == 34 and first.pixels.shape == (17, 2, 32, 56, 3)
    manifest = yaml.safe_load((output_dir / "a" / "samples" / MANIFEST).read_text(encoding="utf-8"))
    assert manifest["files"] == first.files and manifest["seed"] == 3
    assert frame_name(1, 16) in first.files
    for name in first.files:
        a = (output_dir / "a" / "samples" / name).read_bytes()
        assert a == (output_dir / "b" / "samples" / name).read_bytes(), name
    assert manifest["scene_hash"] == second.manifest["scene_hash"]
    values, header = latent_from_bytes((output_dir / "a" / "samples" / LATENT_DUMP).read_bytes())
    np.testing.assert_array_equal(values, first.latent.values)
    assert header == {"frames": 17, "height": 32, "width": 56, "channels": 4, "temporal_ratio": 4}
    assert manifest["latent"] == LATENT_DUMP


def test_sampling_extrapolates_to_longer_clips(output_dir):
    config = tiny_run_config(output_dir, steps=0)
    model = load_trained_model(config, None)
    result = generate(model, synth_scene(0, 65, 1), ToyCodec(config.codec), SamplerConfig(steps=1, cfg_scale=1.0))
    assert result.pixels.shape == (65, 1, 32, 56, 3)
    assert result.latent.shape == (17, 1, 4, 7, 4)
    assert result.latent.frames == 65
    assert np.isfinite(result.pixels).all()


def test_sample_command_synthesizes_a_scene(output_dir):
    handler = CommandHandler(tiny_run_config(output_dir))
    result = handler.execute("sample", frames=9, seed=1)
    assert result["status"] == "success" and result["files"] == 18
    assert (output_dir / "samples" / "scene.yaml").exists()
    missing = handler.execute("sample", scene=str(output_dir / "nope.yaml"))
    assert missing["status"] == "error"


def test_sample_with_truncated_checkpoint_is_a_usage_error(output_dir):
    config = tiny_run_config(output_dir, steps=0)
    saved = Path(Trainer(config, OutputDir(str(output_dir))).run().checkpoint)
    cut = output_dir / "cut.ckpt"
    cut.write_bytes(saved.read_bytes()[:40])
    result = CommandHandler(config).execute("sample", checkpoint=str(cut), frames=1)
    assert result["status"] == "error"
    assert result["message"].startswith("corrupt checkpoint")


# Probes


def test_brightest_centroid_and_contrast():
    frame = np.zeros((4, 8))
    frame[2, 5] = 1.0
    np.testing.assert_allclose(brightest_centroid(frame, quantile=0.99), [5.5, 2.5], atol=1e-6)
    mask = frame > 0.5
    assert region_contrast(frame, mask) == pytest.approx(1.0)
    assert region_contrast(frame, np.zeros_like(mask)) == 0.0


def test_probe_reports_expected_image_motion(output_dir):
    config = tiny_run_config(output_dir)
    model = load_trained_model(config, None)
    results = controllability_probe(
        model, ToyCodec(config.codec), SamplerConfig(steps=1, cfg_scale=1.0), [(0.0, 2.0), (0.0, -2.0)], views=1
    )
    assert len(results) == 2
    # a box moving to +y (left of a forward camera) moves to smaller u
    assert results[0].expected[0] < 0 < results[1].expected[0]


# Commands


def test_codec_check_reports_psnr(output_dir):
    result = CommandHandler(tiny_run_config(output_dir)).execute("codec-check")
    assert result["status"] == "success"
    assert result["full_rank_max_error"] < 1e-9 and result["psnr_db"] > 0
    assert (output_dir / CODEC_REPORT).exists()


def test_ablation_curves_share_a_step_grid(output_dir):
    config = tiny_run_config(output_dir, steps=2, train={"validate_every": 1})
    result = run_ablation(config, OutputDir(str(output_dir)), modes=("downsample4x", "reduce"))
    grids = {mode: [step for step, _ in curve] for mode, curve in result.curves.items()}
    assert grids == {"downsample4x": [1, 2], "reduce": [1, 2]}
    assert result.best in grids
    assert len(read_jsonl(str(output_dir / "ablation" / CURVES))) == 4
    assert (output_dir / "ablation" / SUMMARY).exists()


def test_verify_passes_and_reports_every_property(output_dir):
    assert main(["verify", "--output", str(output_dir)]) == 0
    report = read_jsonl(str(output_dir / VERIFY_REPORT))
    assert len(report) == len(PropertyRegistry().list_properties())
    assert all(r["passed"] for r in report)


def test_flipped_window_fails_the_alignment_property(output_dir):
    code = main(
        [
            "verify",
            "--property",
            "alignment.box_windows_match_codec",
            "--set",
            "fault.flip_window=true",
            "--output",
            str(output_dir),
        ]
    )
    assert code == 1
    (record,) = read_jsonl(str(output_dir / VERIFY_REPORT))
    assert record["property"] == "alignment.box_windows_match_codec" and not record["passed"]


def test_usage_errors_exit_with_two(output_dir):
    assert main(["verify", "--set", "model.widht=3", "--output", str(output_dir)]) == 2
    assert main(["dance"]) == 2


def test_verify_list_prints_the_registry(output_dir, capsys):
    assert main(["verify", "--list", "--output", str(output_dir)]) == 0
    printed = set(capsys.readouterr().out.splitlines())
    assert set(PropertyRegistry().list_properties()) <= printed


def test_unknown_command_is_an_error(output_dir):
    result = CommandHandler(tiny_run_config(output_dir)).execute("dance")
    assert result["status"] == "error"


# Acceptance-scale runs


@pytest.mark.slow
def test_overfit_run_halves_the_loss(output_dir):
    config = load_config(preset="overfit16", overrides=[f"output_dir={output_dir}"], use_env=False)
    result = Trainer(config, OutputDir(str(output_dir))).run()
    assert result.losses[-1] < 0.5 * result.losses[0]


@pytest.mark.slow
def test_downsample_encoder_wins_the_ablation(output_dir):
    config = load_config(preset="overfit16", overrides=[f"output_dir={output_dir}"], use_env=False)
    final = run_ablation(config, OutputDir(str(output_dir))).final
    assert final["downsample4x"] <= final["reduce"]
    assert final["downsample4x"] <= final["interp"]


@pytest.mark.slow
def test_trained_model_follows_box_offsets(output_dir):
    config = load_config(preset="overfit16", overrides=[f"output_dir={output_dir}"], use_env=False)
    trained = Trainer(config, OutputDir(str(output_dir))).run()
    model = load_trained_model(config, trained.checkpoint)
    offsets = [(dx, dy) for dx in (0.0, 1.0) for dy in (-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0)]
    results = controllability_probe(
        model,
        ToyCodec(config.codec),
        config.sampler,
        offsets,
        frames=config.stages[0].buckets[0].frames,
        views=config.data.views,
        spec=config.data.synth,
    )
    assert sum(r.agrees for r in results) >= 12
    assert np.mean([r.contrast for r in results]) > 0
