"""Command implementations: one method per CLI subcommand, all driven by a ``RunConfig``."""

from __future__ import annotations

import hashlib
import logging
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from saliency_adapt.core.config_manager import ConfigManager, RunConfig, deep_merge, require_paths, validate_run_config
from saliency_adapt.core.errors import InvalidArgumentError, InvalidConfigError
from saliency_adapt.core.ledger import RunLedger
from saliency_adapt.core.parallel import default_workers
from saliency_adapt.core.persistence import PersistentStore
from saliency_adapt.core.pngio import decode_png
from saliency_adapt.pipeline.assets import BackgroundAsset, ForegroundAsset, as_rgb, load_assets, procedural_assets, save_assets
from saliency_adapt.pipeline.manifest import MANIFEST_NAME, DatasetReader, read_manifest, write_dataset
from saliency_adapt.pipeline.metrics import evaluate_manifest
from saliency_adapt.pipeline.predictor import SaliencyPredictor, load_checkpoint
from saliency_adapt.pipeline.reports import plot_mae_by_round, write_ablation, write_eval_result, write_stats
from saliency_adapt.pipeline.synthesis import (
    SynthRecord,
    center_bias_map,
    generate_dataset,
    generate_target_domain,
    object_size_ratio,
    regenerate_records,
    size_ratio_histogram,
)
from saliency_adapt.pipeline.trainer import run_pipeline

logger = logging.getLogger(__name__)

SOURCE_SPLIT = "source"
TARGET_TRAIN_SPLIT = "target_train"
TARGET_EVAL_SPLIT = "target_eval"

_ASSET_STREAM, _SOURCE_STREAM, _TARGET_STREAM = 0, 1, 2


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def apply_arm(config: RunConfig, arm: str) -> RunConfig:
    """Rewrite schedule, augmentations and UPL switches for one ablation arm."""
    train = config.train
    rounds = train.schedule.rounds
    source_props = list(train.schedule.source_props)
    target_props = list(train.schedule.target_props)
    augment = train.augment.model_dump(mode="json")
    selection, reweighting = True, True
    if arm == "source_only":
        rounds, source_props, target_props = 1, source_props[:1], [0.0]
    elif arm in ("vanilla_pl", "upl_wo_iss"):
        target_props = target_props[:1] + [1.0] * (rounds - 1)
        selection, reweighting = False, arm == "upl_wo_iss"
    elif arm == "upl_wo_ppr":
        reweighting = False
    elif arm in ("upl_flip", "upl_scale", "upl_fda"):
        kept = arm.removeprefix("upl_")
        augment.update({kind: kind == kept for kind in ("flip", "scale", "fda")})
    elif arm != "upl":
        raise InvalidConfigError("train.arm", f"unknown arm {arm!r}")
    update = {
        "train": {
            "arm": arm,
            "schedule": {"rounds": rounds, "source_props": source_props, "target_props": target_props},
            "augment": augment,
            "sample_selection": selection,
            "pixel_reweighting": reweighting,
        }
    }
    return validate_run_config(deep_merge(config.model_dump(mode="json"), update))


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class SaliencyLab:
    """Experiment front end: asset pools, dataset builds, training runs, evaluation and ablations."""

    def __init__(self, config: RunConfig, workers: int | None = None) -> None:
        self.config = config
        self.workers = workers or config.workers or default_workers()
        self.config_manager = ConfigManager()

    def split_root(self, split: str) -> Path:
        return Path(self.config.paths.datasets) / split

    def _require_split(self, split: str) -> Path:
        require_paths(self.config, "datasets")
        root = self.split_root(split)
        if not (root / MANIFEST_NAME).exists():
            raise InvalidConfigError("paths.datasets", f"no {split} dataset at {root}; run gen-dataset first")
        return root

    def _echo_config(self, config: RunConfig, run_dir: Path) -> Path:
        return self.config_manager.save_run_config(config, Path(run_dir) / "config.json")

    def _background_dims(self) -> tuple[int, int]:
        dataset = self.config.dataset
        return (
            max(dataset.canvas_dims[0], dataset.min_background_dims[0]),
            max(dataset.canvas_dims[1], dataset.min_background_dims[1]),
        )

    def _procedural_pool(self, n_fg: int, n_bg: int, seed: int) -> tuple[list[ForegroundAsset], list[BackgroundAsset], dict[str, Any]]:
        dataset = self.config.dataset
        fgs, bgs = procedural_assets(
            n_fg,
            n_bg,
            seed,
            canvas_dims=dataset.canvas_dims,
            foreground_extent=dataset.foreground_extent,
            background_dims=self._background_dims(),
        )
        provenance = {
            "source": "procedural",
            "seed": seed,
            "n_fg": n_fg,
            "n_bg": n_bg,
            "canvas_dims": list(dataset.canvas_dims),
            "foreground_extent": list(dataset.foreground_extent),
            "background_dims": list(self._background_dims()),
        }
        return fgs, bgs, provenance

    def asset_pool(self, n_fg: int, n_bg: int) -> tuple[list[ForegroundAsset], list[BackgroundAsset], dict[str, Any]]:
        if self.config.dataset.asset_source == "procedural":
            return self._procedural_pool(n_fg, n_bg, derive_seed(self.config.seed, _ASSET_STREAM))
        require_paths(self.config, "assets")
        assets_root = Path(self.config.paths.assets)
        min_dims = self.config.dataset.min_background_dims
        fgs, bgs = load_assets(assets_root, min_dims)
        return fgs, bgs, {"source": "folder", "path": str(assets_root), "min_background_dims": list(min_dims)}

    @staticmethod
    def assets_from_provenance(provenance: dict[str, Any]) -> tuple[list[ForegroundAsset], list[BackgroundAsset]]:
        if provenance.get("source") == "procedural":
            return procedural_assets(
                int(provenance["n_fg"]),
                int(provenance["n_bg"]),
                int(provenance["seed"]),
                canvas_dims=tuple(provenance["canvas_dims"]),
                foreground_extent=tuple(provenance["foreground_extent"]),
                background_dims=tuple(provenance["background_dims"]),
            )
        if provenance.get("source") == "folder":
            return load_assets(Path(provenance["path"]), tuple(provenance["min_background_dims"]))
        raise InvalidArgumentError(f"unknown asset provenance {provenance!r}")

    def gen_assets(self, n_fg: int, n_bg: int, out_dir: Path | None = None) -> dict[str, Any]:
        out_dir = Path(out_dir or self.config.paths.assets)
        fgs, bgs, provenance = self._procedural_pool(n_fg, n_bg, self.config.seed)
        save_assets(fgs, bgs, out_dir)
        PersistentStore(out_dir).write_json("provenance.json", provenance)
        logger.info("Wrote %d foregrounds and %d backgrounds to %s", n_fg, n_bg, out_dir)
        return {"out_dir": str(out_dir), "foregrounds": n_fg, "backgrounds": n_bg, "seed": self.config.seed}

    def gen_dataset(self) -> dict[str, Any]:
        dataset = self.config.dataset
        n_target = dataset.n_target_train + dataset.n_target_eval
        n_bg_source = math.ceil(dataset.n_source * dataset.background_ratio)
        n_bg_target = math.ceil(n_target * dataset.background_ratio)
        fgs, bgs, provenance = self.asset_pool(dataset.n_source + n_target, n_bg_source + n_bg_target)
        if len(fgs) < dataset.n_source + n_target:
            raise InvalidArgumentError(
                f"{len(fgs)} foregrounds available, {dataset.n_source + n_target} needed for source + target"
            )
        n_bg_source = min(n_bg_source, len(bgs) - n_target)
        common = {
            "canvas_dims": dataset.canvas_dims,
            "assets": provenance,
            "workers": self.workers,
        }
        source = generate_dataset(
            fgs[: dataset.n_source],
            bgs[:n_bg_source],
            dataset.scale_range,
            derive_seed(self.config.seed, _SOURCE_STREAM),
            split=SOURCE_SPLIT,
            **common,
        )
        target = generate_target_domain(
            fgs[dataset.n_source : dataset.n_source + n_target],
            bgs[n_bg_source:],
            self.config.shift,
            derive_seed(self.config.seed, _TARGET_STREAM),
            scale_range=dataset.scale_range,
            split="target",
            **common,
        )
        splits = {
            SOURCE_SPLIT: source,
            TARGET_TRAIN_SPLIT: target.subset(TARGET_TRAIN_SPLIT, 0, dataset.n_target_train),
            TARGET_EVAL_SPLIT: target.subset(TARGET_EVAL_SPLIT, dataset.n_target_train),
        }
        ledger = RunLedger(Path(self.config.paths.datasets) / "logs" / "run_ledger.jsonl")
        summary: dict[str, Any] = {}
        for split, manifest in splits.items():
            path = write_dataset(manifest, self.split_root(split))
            summary[split] = {
                "records": len(manifest),
                "evaluation_only": manifest.evaluation_only,
                "manifest_sha256": file_digest(path),
            }
        ledger.append("gen_dataset", "ok", details=summary)
        return summary

    def regenerate_split(self, split: str) -> list[SynthRecord]:
        manifest = read_manifest(self._require_split(split))
        fgs, bgs = self.assets_from_provenance(manifest.assets)
        return regenerate_records(manifest, fgs, bgs)

    def stats(self, manifest_dir: Path | None = None, out_dir: Path | None = None) -> dict[str, Any]:
        manifest_dir = Path(manifest_dir or self._require_split(SOURCE_SPLIT))
        out_dir = Path(out_dir or Path(self.config.paths.run_dir) / "stats")
        reader = DatasetReader(manifest_dir, purpose="eval")
        labels = [reader.label(record_id) for record_id in reader.record_ids]
        if not labels:
            raise InvalidArgumentError(f"{manifest_dir} holds no records")
        ratios = [object_size_ratio(label) for label in labels]
        summary = write_stats(
            PersistentStore(out_dir),
            ratios,
            size_ratio_histogram(ratios, self.config.stats.histogram_bins),
            center_bias_map(labels, self.config.stats.common_dims),
        )
        return {"manifest": str(manifest_dir), "out_dir": str(out_dir), **summary}

    def _run(self, config: RunConfig, run_dir: Path) -> dict[str, Any]:
        self._echo_config(config, run_dir)
        result = run_pipeline(
            config,
            self._require_split(SOURCE_SPLIT),
            self._require_split(TARGET_TRAIN_SPLIT),
            self._require_split(TARGET_EVAL_SPLIT),
            run_dir,
            workers=self.workers,
        )
        store = PersistentStore(run_dir)
        if result.final_eval is not None:
            write_eval_result(PersistentStore(store.path("eval")), result.final_eval, plot=config.metrics.plot)
        if config.metrics.plot:
            plot_mae_by_round(store, result.history)
        return {
            "run_dir": str(run_dir),
            "arm": config.train.arm,
            "seed": config.seed,
            "checkpoint": str(result.checkpoint),
            "checksum": result.params.checksum(),
            "mae": result.final_eval.mae if result.final_eval else None,
            "f_beta": result.final_eval.f_beta if result.final_eval else None,
            "history": [{"round": m.round_index, "mae": m.mae, "f_beta": m.f_beta} for m in result.history],
        }

    def train(self, run_dir: Path | None = None) -> dict[str, Any]:
        run_dir = Path(run_dir or self.config.paths.run_dir)
        return self._run(apply_arm(self.config, self.config.train.arm), run_dir)

    def evaluate(self, checkpoint: Path, manifest_dir: Path | None = None, out_dir: Path | None = None) -> dict[str, Any]:
        manifest_dir = Path(manifest_dir or self._require_split(TARGET_EVAL_SPLIT))
        out_dir = Path(out_dir or Path(self.config.paths.run_dir) / "eval")
        result = evaluate_manifest(
            SaliencyPredictor(load_checkpoint(checkpoint)),
            DatasetReader(manifest_dir, purpose="eval"),
            self.config.train.test_input_dims,
            beta_sq=self.config.metrics.beta_sq,
            per_image=self.config.metrics.per_image,
            workers=self.workers,
        )
        write_eval_result(PersistentStore(out_dir), result, plot=self.config.metrics.plot)
        return {"manifest": str(manifest_dir), "out_dir": str(out_dir), **result.summary()}

    def infer(self, checkpoint: Path, image_paths: Sequence[Path], out_dir: Path | None = None) -> dict[str, Any]:
        out_dir = Path(out_dir or Path(self.config.paths.run_dir) / "infer")
        predictor = SaliencyPredictor(load_checkpoint(checkpoint))
        store = PersistentStore(out_dir)
        outputs = []
        for image_path in image_paths:
            image_path = Path(image_path)
            if not image_path.exists():
                raise FileNotFoundError(f"input image not found: {image_path}")
            image = as_rgb(decode_png(image_path.read_bytes()))
            saliency = predictor.predict_resized(image, self.config.train.test_input_dims)
            outputs.append(str(store.write_png(f"{image_path.stem}_saliency.png", saliency)))
        return {"out_dir": str(out_dir), "outputs": outputs}

    def ablate(self, out_dir: Path | None = None) -> dict[str, Any]:
        out_dir = Path(out_dir or Path(self.config.paths.run_dir) / "ablation")
        self._echo_config(self.config, out_dir)
        runs = []
        for arm in self.config.ablation.arms:
            for seed in self.config.ablation.seeds:
                seeded = self.config.model_copy(update={"seed": seed})
                summary = self._run(apply_arm(seeded, arm), out_dir / arm / f"seed_{seed}")
                runs.append(summary)
                logger.info("Ablation arm %s seed %d: mae=%.5f", arm, seed, summary["mae"])
        rows = write_ablation(PersistentStore(out_dir), runs, self.config.ablation.arms)
        return {"out_dir": str(out_dir), "arms": rows}
