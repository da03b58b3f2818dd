from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from saliency_adapt.core.config_manager import ConfigManager, RunConfig
from saliency_adapt.core.errors import InvalidConfigError
from saliency_adapt.core.imaging import BinaryMask, GrayMap, RgbImage
from saliency_adapt.core.ledger import RunLedger
from saliency_adapt.core.persistence import PersistentStore
from saliency_adapt.core.pngio import decode_png, encode_png
from saliency_adapt.interface.cli import main
from saliency_adapt.pipeline.experiment import SaliencyLab, apply_arm
from saliency_adapt.pipeline.manifest import DatasetManifest, DatasetReader, write_dataset
from saliency_adapt.pipeline.synthesis import SynthRecord


def tiny_settings(tmp_path: Path) -> dict[str, Any]:
    return {
        "paths": {
            "assets": str(tmp_path / "assets"),
            "datasets": str(tmp_path / "datasets"),
            "run_dir": str(tmp_path / "runs" / "default"),
        },
        "dataset": {
            "canvas_dims": [12, 12],
            "min_background_dims": [12, 12],
            "n_source": 6,
            "n_target_train": 4,
            "n_target_eval": 3,
            "foreground_extent": [0.4, 0.7],
        },
        "train": {
            "schedule": {"rounds": 2, "source_props": [1.0, 0.5], "target_props": [0.0, 0.5]},
            "augment": {"scale_dims": [16, 16]},
            "batch_size": 4,
            "epochs_per_round": 1,
            "train_input_dims": [12, 12],
            "test_input_dims": [12, 12],
        },
        "metrics": {"plot": False},
        "stats": {"common_dims": [12, 12]},
        "seed": 5,
    }


def write_config(tmp_path: Path) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_settings(tmp_path)), encoding="utf-8")
    return path


def tiny_lab(tmp_path: Path, overrides: list[str] | None = None, workers: int = 1) -> SaliencyLab:
    config = ConfigManager().load_run_config(write_config(tmp_path), overrides or [])
    return SaliencyLab(config, workers=workers)


def round_maes(run_dir: Path) -> list[float]:
    with (run_dir / "metrics.csv").open(encoding="utf-8", newline="") as handle:
        return [float(row["mae"]) for row in csv.DictReader(handle)]


def ledger_events(run_dir: Path, action: str) -> list[dict[str, Any]]:
    return [event for event in RunLedger(run_dir / "logs" / "run_ledger.jsonl").events() if event["action"] == action]


def test_gen_dataset_builds_three_reproducible_splits(tmp_path: Path) -> None:
    first = tiny_lab(tmp_path).gen_dataset()
    second = tiny_lab(tmp_path, [f"paths.datasets={json.dumps(str(tmp_path / 'again'))}"], workers=3).gen_dataset()

    assert {split: info["records"] for split, info in first.items()} == {
        "source": 6,
        "target_train": 4,
        "target_eval": 3,
    }
    assert first["source"]["evaluation_only"] is False
    assert first["target_train"]["evaluation_only"] is True
    assert first["target_eval"]["evaluation_only"] is True
    for split in first:
        assert first[split]["manifest_sha256"] == second[split]["manifest_sha256"]
        for name in os.listdir(tmp_path / "datasets" / split / "images"):
            a = (tmp_path / "datasets" / split / "images" / name).read_bytes()
            b = (tmp_path / "again" / split / "images" / name).read_bytes()
            assert a == b


def test_source_and_target_use_disjoint_assets(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path)
    lab.gen_dataset()
    readers = {split: DatasetReader(lab.split_root(split), purpose="eval") for split in ("source", "target_train", "target_eval")}
    fg_ids = {split: {reader.entry(i).fg_id for i in reader.record_ids} for split, reader in readers.items()}
    bg_ids = {split: {reader.entry(i).bg_id for i in reader.record_ids} for split, reader in readers.items()}

    assert not fg_ids["source"] & (fg_ids["target_train"] | fg_ids["target_eval"])
    assert not bg_ids["source"] & (bg_ids["target_train"] | bg_ids["target_eval"])


@pytest.mark.parametrize("asset_source", ["procedural", "folder"])
def test_regenerated_splits_match_files(tmp_path: Path, asset_source: str) -> None:
    lab = tiny_lab(tmp_path, [f"dataset.asset_source={asset_source}"])
    if asset_source == "folder":
        lab.gen_assets(13, 17)
    lab.gen_dataset()

    for split in ("source", "target_train", "target_eval"):
        reader = DatasetReader(lab.split_root(split), purpose="eval")
        for record in lab.regenerate_split(split):
            assert np.array_equal(record.image.pixels, reader.image(record.record_id).pixels)
            assert np.array_equal(record.label.values, reader.label(record.record_id).values)


def test_train_is_deterministic_and_writes_artifacts(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path)
    lab.gen_dataset()
    first = lab.train(tmp_path / "run_a")
    second = tiny_lab(tmp_path, workers=3).train(tmp_path / "run_b")

    assert first["checksum"] == second["checksum"]
    assert (tmp_path / "run_a" / "metrics.csv").read_bytes() == (tmp_path / "run_b" / "metrics.csv").read_bytes()
    for relative in (
        "config.json",
        "augmentations.json",
        "final.ckpt",
        "rounds/1/checkpoint.ckpt",
        "rounds/2/checkpoint.ckpt",
        "eval/summary.csv",
        "eval/pr_curve.csv",
    ):
        assert (tmp_path / "run_a" / relative).exists(), relative
    assert not (tmp_path / "run_a" / "rounds" / "1" / "pseudo").exists()
    assert len(list((tmp_path / "run_a" / "rounds" / "2" / "pseudo").glob("*.json"))) == 4
    assert len((tmp_path / "run_a" / "eval" / "pr_curve.csv").read_text().splitlines()) == 257
    assert [row["round"] for row in first["history"]] == [1, 2]
    assert round_maes(tmp_path / "run_a") == pytest.approx([row["mae"] for row in first["history"]], abs=1e-6)


def test_round_schedule_reaches_the_ledger(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path)
    lab.gen_dataset()
    run_dir = tmp_path / "run"
    lab.train(run_dir)

    started = ledger_events(run_dir, "round_start")
    assert [(e["details"]["round"], e["details"]["target_prop"]) for e in started] == [(1, 0.0), (2, 0.5)]
    trained = ledger_events(run_dir, "round_trained")
    assert [event["details"]["source_samples"] for event in trained] == [6, 3]
    assert trained[0]["details"]["target_samples"] == 0
    refreshed = ledger_events(run_dir, "pseudo_labels_refreshed")
    assert len(refreshed) == 1
    assert refreshed[0]["details"]["candidates"] == 4
    assert refreshed[0]["details"]["selected"] <= 2


def test_vanilla_arm_trains_on_every_target(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path, ["train.arm=vanilla_pl"])
    lab.gen_dataset()
    run_dir = tmp_path / "run"
    lab.train(run_dir)

    refreshed = ledger_events(run_dir, "pseudo_labels_refreshed")
    assert refreshed[0]["details"]["selected"] == 4
    echoed = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    assert echoed["train"]["sample_selection"] is False
    assert echoed["train"]["pixel_reweighting"] is False
    weights = decode_png((run_dir / "rounds" / "2" / "pseudo" / "target_00000_weight.png").read_bytes())
    assert np.all(weights.values == 1.0)


def test_training_never_reads_target_train_labels(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    lab = tiny_lab(tmp_path)
    lab.gen_dataset()
    baseline = lab.train(tmp_path / "run_a")["checksum"]

    for label in (tmp_path / "datasets" / "target_train" / "labels").glob("*.png"):
        label.write_bytes(b"not a label")
    opened: list[Path] = []
    original = PersistentStore.read_png

    def spy(self: PersistentStore, relative_path: str | Path) -> Any:
        opened.append(self.path(relative_path))
        return original(self, relative_path)

    monkeypatch.setattr(PersistentStore, "read_png", spy)
    assert lab.train(tmp_path / "run_b")["checksum"] == baseline
    assert opened
    assert not [path for path in opened if "target_train" in path.parts and "labels" in path.parts]


def test_source_only_arm_is_a_single_round(tmp_path: Path) -> None:
    config = apply_arm(ConfigManager().load_run_config(write_config(tmp_path)), "source_only")

    assert config.train.schedule.rounds == 1
    assert config.train.schedule.target_props == [0.0]
    assert apply_arm(config, "source_only") == config


@pytest.mark.parametrize(
    ("arm", "flags"),
    [
        ("upl", (True, True, True, True, True)),
        ("upl_wo_iss", (False, True, True, True, True)),
        ("upl_wo_ppr", (True, False, True, True, True)),
        ("upl_flip", (True, True, True, False, False)),
        ("upl_scale", (True, True, False, True, False)),
        ("upl_fda", (True, True, False, False, True)),
    ],
)
def test_arm_switches(tmp_path: Path, arm: str, flags: tuple[bool, ...]) -> None:
    config: RunConfig = apply_arm(ConfigManager().load_run_config(write_config(tmp_path)), arm)
    train = config.train

    assert (
        train.sample_selection,
        train.pixel_reweighting,
        train.augment.flip,
        train.augment.scale,
        train.augment.fda,
    ) == flags
    assert train.arm == arm


def test_evaluate_and_infer(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path, ["metrics.plot=true"])
    lab.gen_dataset()
    checkpoint = Path(lab.train(tmp_path / "run")["checkpoint"])
    assert (tmp_path / "run" / "mae_by_round.svg").exists()

    summary = lab.evaluate(checkpoint, out_dir=tmp_path / "eval")
    assert summary["n_images"] == 3
    assert 0.0 <= summary["mae"] <= 1.0
    assert (tmp_path / "eval" / "pr_curve.svg").exists()

    image_path = tmp_path / "photo.png"
    image_path.write_bytes(encode_png(RgbImage(np.random.default_rng(0).integers(0, 256, (20, 14, 3), dtype=np.uint8))))
    outputs = lab.infer(checkpoint, [image_path], tmp_path / "infer")["outputs"]
    saliency = decode_png(Path(outputs[0]).read_bytes())
    assert isinstance(saliency, GrayMap)
    assert saliency.dims == (20, 14)


def test_stats_of_identical_masks(tmp_path: Path) -> None:
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[3:9, 2:6] = 1
    image = RgbImage(np.zeros((12, 12, 3), dtype=np.uint8))
    records = [
        SynthRecord(f"source_{i:05d}", image, BinaryMask(mask), 1.0, (6, 4), f"fg_{i}", f"bg_{i}", i)
        for i in range(3)
    ]
    manifest = DatasetManifest("source", 0, [r.to_entry() for r in records], records=records)
    write_dataset(manifest, tmp_path / "identical")

    summary = tiny_lab(tmp_path).stats(tmp_path / "identical", tmp_path / "stats")
    heatmap = decode_png((tmp_path / "stats" / "center_bias.png").read_bytes())
    assert np.array_equal(heatmap.values, mask.astype(np.float64))
    assert summary["count"] == 3
    assert summary["size_ratio_mean"] == pytest.approx(24 / 144)
    rows = list(csv.DictReader((tmp_path / "stats" / "size_ratio_histogram.csv").open(encoding="utf-8")))
    assert sum(int(row["count"]) for row in rows) == 3


def test_ablate_writes_one_row_per_arm(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path)
    lab.gen_dataset()
    result = lab.ablate(tmp_path / "ablation")

    assert [row["arm"] for row in result["arms"]] == ["source_only", "vanilla_pl", "upl"]
    lines = (tmp_path / "ablation" / "comparison.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "arm,n_seeds,median_mae,median_f_beta"
    assert len(lines) == 4
    assert (tmp_path / "ablation" / "upl" / "seed_0" / "final.ckpt").exists()


def test_cli_round_trip(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config_path = write_config(tmp_path)

    assert main(["gen-dataset", "--config", str(config_path), "--workers", "1"]) == 0
    generated = json.loads(capsys.readouterr().out)
    assert generated["target_eval"]["records"] == 3

    run_dir = tmp_path / "cli_run"
    assert main(["train", "--config", str(config_path), "--out", str(run_dir), "--workers", "1"]) == 0
    trained = json.loads(capsys.readouterr().out)
    assert Path(trained["checkpoint"]).exists()

    assert main(["eval", "--config", str(config_path), "--checkpoint", trained["checkpoint"], "--out", str(tmp_path / "e")]) == 0
    assert json.loads(capsys.readouterr().out)["n_images"] == 3


def test_cli_reports_invalid_config(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["train", "--config", str(write_config(tmp_path)), "--set", "train.k=0"])

    assert code == 2
    err = capsys.readouterr().err
    error = json.loads(err[err.rindex("{\n") :])
    assert error["error"] == "InvalidConfigError"
    assert error["field"] == "train.k"


def test_cli_train_without_datasets(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["train", "--config", str(write_config(tmp_path))]) == 2
    err = capsys.readouterr().err
    assert json.loads(err[err.rindex("{\n") :])["field"] == "paths.datasets"


def test_folder_assets_require_an_existing_assets_path(tmp_path: Path) -> None:
    lab = tiny_lab(tmp_path, ["dataset.asset_source=folder"])

    with pytest.raises(InvalidConfigError, match="path does not exist") as excinfo:
        lab.gen_dataset()
    assert excinfo.value.field == "paths.assets"
    assert not (tmp_path / "datasets" / "source").exists()


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv("SALIENCY_ADAPT_ACCEPTANCE"), reason="full-size benchmark; set SALIENCY_ADAPT_ACCEPTANCE=1")
def test_full_size_ablation_ordering_and_round_trend(tmp_path: Path) -> None:
    config = ConfigManager().load_run_config(
        None,
        [
            f"paths.datasets={json.dumps(str(tmp_path / 'datasets'))}",
            "ablation.seeds=[0, 1, 2]",
        ],
    )
    lab = SaliencyLab(config)
    lab.gen_dataset()
    rows = {row["arm"]: row for row in lab.ablate(tmp_path / "ablation")["arms"]}
    upl, vanilla, source_only = (rows[arm]["median_mae"] for arm in ("upl", "vanilla_pl", "source_only"))

    assert vanilla - upl >= 0.005, rows
    assert source_only - vanilla >= 0.005, rows

    maes = round_maes(tmp_path / "ablation" / "upl" / "seed_0")
    assert len(maes) == 6
    assert maes[-1] <= maes[0], maes
    assert all(later <= earlier + 0.002 for earlier, later in zip(maes, maes[1:])), maes
