import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autograd import precision
from impl import (
    BASE_CHECKPOINT,
    MLP_CHECKPOINT,
    SMN_CHECKPOINT,
    ContextModel,
    Evaluator,
    FasterRCNN,
    ParameterStore,
    Rollout,
    SpatialMemory,
    Trainer,
    checkpoint_digest,
)
from impl.datastore import read_detections, write_detections
from impl.gradcheck_suite import TOLERANCE, run_suite
from impl.probes import dedup_probe, reconstruction_recall, score_readoff
from impl.reporter import (
    plot_loss_curves,
    plot_memory,
    plot_metric_bars,
    plot_pr_curves,
    plot_score_readoff,
    read_loss_log,
    read_results,
    read_trace,
    write_per_class,
    write_results,
)
from interface import BaseDatastore, BaseSceneGenerator, Detection, EvalResult, Protocol, SceneRecord
from util.config import RunConfig, dump_run_config
from util.errors import ConfigError, DatasetError, NumericalError, SceneGenerationError
from util.tensor_io import config_digest, file_digest, load_checkpoint, save_tensor

logger = logging.getLogger(__name__)

METHODS = ("baseline", "mlp", "smn")
SPLITS = ("train", "test")
CHECKPOINTS = {"baseline": BASE_CHECKPOINT, "mlp": MLP_CHECKPOINT, "smn": SMN_CHECKPOINT}
GroundTruth = Tuple[np.ndarray, np.ndarray]


@dataclass
class Models:
    params: ParameterStore
    detector: FasterRCNN
    memory: Optional[SpatialMemory] = None
    context: Optional[ContextModel] = None


def method_config(config: RunConfig, method: str) -> RunConfig:
    """The run configuration with the context model switched to the method's mode."""
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}'; expected one of {', '.join(METHODS)}")
    if method == "baseline" or config.context.mode == method:
        return config
    return config.model_copy(update={"context": config.context.model_copy(update={"mode": method})})


def build_models(config: RunConfig, method: str = "smn") -> Models:
    """Freshly initialised components for one method, sharing a single parameter store."""
    config = method_config(config, method)
    image_hw = (config.scene.image_h, config.scene.image_w)
    params = ParameterStore(np.dtype(config.train.precision))
    scale = config.train.init_scale
    detector = FasterRCNN(config.detector, image_hw, params, np.random.default_rng((config.seed, 0)), scale)
    if method == "baseline":
        return Models(params, detector)
    memory = None
    channels = config.detector.backbone_channels
    if method == "smn":
        memory = SpatialMemory(config.memory, channels, config.num_classes + 1, image_hw, params, np.random.default_rng((config.seed, 1)), scale)
        channels = config.memory.depth
    context = ContextModel(config.context, config.detector, channels, params, np.random.default_rng((config.seed, 2)), scale)
    return Models(params, detector, memory, context)


def dataset_digest(config: RunConfig, split: str) -> str:
    return config_digest({"scene": config.scene.model_dump(mode="json"), "seed": config.seed, "split": split})


def scene_seeds(config: RunConfig, split: str) -> List[int]:
    count = config.scene.train_images if split == "train" else config.scene.test_images
    states = np.random.SeedSequence([config.seed, SPLITS.index(split)]).generate_state(count, dtype=np.uint64)
    return [int(s) for s in states]


def ground_truths(records: Sequence[SceneRecord]) -> List[GroundTruth]:
    return [(record.boxes, record.class_ids) for record in records]


def _print_result(result: EvalResult) -> None:
    print(
        f"📊 {result.method:<8} {result.protocol:<18} AP {result.ap:.3f}  AP50 {result.ap50:.3f}  "
        f"AP75 {result.ap75:.3f}  AR10 {result.ar10:.3f}  mAP50 {result.map50:.3f}"
    )


@dataclass
class SMNPipeline:
    """Orchestrates generation, training, evaluation and diagnostics over one output directory."""

    config: RunConfig
    out_dir: Path
    generator: BaseSceneGenerator
    datastore: BaseDatastore
    evaluator: Evaluator
    workers: int = 4

    def _map(self, fn, items: Sequence) -> List:
        if self.workers <= 1 or len(items) < 2:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(fn, items))

    # -- data ----------------------------------------------------------------

    def gen_data(self) -> Dict[str, str]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        digests: Dict[str, str] = {}
        for split in SPLITS:
            records = self._map(self.generator.generate, scene_seeds(self.config, split))
            violations = [message for record in records for message in self.generator.check_rules(record)]
            if violations:
                raise SceneGenerationError(f"{len(violations)} rule violation(s) in the {split} split, first: {violations[0]}")
            path = self.out_dir / f"{split}.smnd"
            self.datastore.write_dataset(records, path, dataset_digest(self.config, split))
            self.datastore.export_annotations(records, self.out_dir / f"annotations_{split}.jsonl")
            digests[split] = file_digest(path)
            instances = sum(record.num_instances for record in records)
            print(f"✅ Wrote {len(records)} {split} scenes ({instances} instances) to {path}")
            print(f"   sha256 {digests[split]}")
        (self.out_dir / "config.yml").write_text(dump_run_config(self.config), encoding="utf-8")
        return digests

    def load_split(self, split: str) -> List[SceneRecord]:
        path = self.out_dir / f"{split}.smnd"
        digest, records = self.datastore.read_dataset(path)
        if digest != dataset_digest(self.config, split):
            raise DatasetError(f"{path} was generated from a different scene configuration or seed; rerun gen-data")
        return records

    # -- models --------------------------------------------------------------

    def load_models(self, method: str) -> Models:
        """Models for `method` with the trained weights; every needed checkpoint must exist."""
        config = method_config(self.config, method)
        models = build_models(config, method)
        base_prefix = f"{models.detector.prefix}/"
        base = load_checkpoint(self.out_dir / BASE_CHECKPOINT, checkpoint_digest(config, "base"))
        models.params.load_state_dict(base, base_prefix)
        if method != "baseline":
            tensors = load_checkpoint(self.out_dir / CHECKPOINTS[method], checkpoint_digest(config, method))
            models.params.load_state_dict(tensors, f"{method}/")
            if any(name.startswith(base_prefix) for name in tensors):
                # jointly trained designs carry their own copy of the detector
                models.params.load_state_dict(tensors, base_prefix)
        logger.debug("Loaded %d parameters for %s", len(models.params), method)
        return models

    def rollout(self, models: Models, protocol: Optional[Protocol] = None) -> Rollout:
        config = self.config.rollout
        if protocol is not None:
            config = config.model_copy(
                update={
                    "iterations": protocol.cap,
                    "n1": min(config.n1, protocol.cap),
                    "emission": protocol.emission,
                    "proposal_mode": protocol.proposal_mode,
                }
            )
        return Rollout(models.detector, models.memory, models.context, config)

    # -- training ------------------------------------------------------------

    def train_base(self) -> Path:
        records = self.load_split("train")
        models = build_models(self.config, "baseline")
        print(f"🔍 Training the base detector on {len(records)} scenes for {self.config.train.base_steps} steps")
        path = Trainer(self.config, models.params, models.detector).train_base(records, self.out_dir)
        print(f"✅ Saved base checkpoint to {path}")
        return path

    def train_smn(self, method: str = "smn", init_checkpoint: Optional[Path] = None) -> Path:
        if method not in ("smn", "mlp"):
            raise ConfigError(f"train-smn trains 'smn' or 'mlp', not '{method}'")
        config = method_config(self.config, method)
        records = self.load_split("train")
        models = build_models(config, method)
        base = load_checkpoint(self.out_dir / BASE_CHECKPOINT, checkpoint_digest(config, "base"))
        models.params.load_state_dict(base, f"{models.detector.prefix}/")
        trainer = Trainer(config, models.params, models.detector, models.memory, models.context)
        # the context baseline has no memory to unroll
        schedule = [(1, config.train.steps)] if method == "mlp" else None
        stages = schedule or config.train.curriculum
        print(f"🔍 Training {method} on {len(records)} scenes, stages (N, steps): {stages}")
        path = trainer.curriculum_train(records, self.out_dir, schedule, init_checkpoint)
        print(f"✅ Saved {method} checkpoint to {path}")
        return path

    # -- evaluation ----------------------------------------------------------

    def detect(self, models: Models, method: str, protocol: Protocol, records: Sequence[SceneRecord]) -> List[List[Detection]]:
        rollout = self.rollout(models, protocol)

        def one(record: SceneRecord) -> List[Detection]:
            with precision(models.params.dtype):
                if method == "baseline":
                    return models.detector.detect(record.image, protocol.proposal_mode, protocol.emission)
                if method == "mlp":
                    return rollout.single_pass_detect(record.image, protocol.proposal_mode, protocol.emission)
                return rollout.trace_detections(rollout.run(record.image))

        return self._map(one, records)

    def _evaluate_method(
        self, method: str, models: Models, records: Sequence[SceneRecord]
    ) -> Tuple[List[EvalResult], Dict[str, List[List[Detection]]]]:
        gts = ground_truths(records)
        results: List[EvalResult] = []
        detections: Dict[str, List[List[Detection]]] = {}
        for protocol in self.config.eval.protocols:
            found = self.detect(models, method, protocol, records)
            write_detections(found, self.out_dir / f"detections_{method}_{protocol.name}.jsonl")
            result = self.evaluator.evaluate(found, gts, protocol.cap)
            result.method, result.protocol = method, protocol.name
            _print_result(result)
            results.append(result)
            detections[protocol.name] = found
        return results, detections

    def run_probes(self, models: Models, records: Sequence[SceneRecord]) -> Dict[str, float]:
        subset = list(records[: self.config.eval.probe_images])
        rollout = self.rollout(models)
        with precision(models.params.dtype):
            probe = dedup_probe(rollout, subset, self.config.eval.probe_iou)
            summary = dict(probe.summary())
            summary["reconstruction_recall"] = reconstruction_recall(rollout, subset)
        path = self.out_dir / "probes.json"
        path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
        print(
            f"🔍 De-duplication: {100 * summary['suppressed_fraction']:.1f}% of {probe.scenes} scenes suppressed; "
            f"reconstruction recall {summary['reconstruction_recall']:.3f}"
        )
        return summary

    def evaluate(self, method: str = "smn", detections_path: Optional[Path] = None) -> List[EvalResult]:
        records = self.load_split("test")
        if detections_path is not None:
            found = read_detections(detections_path, len(records))
            result = self.evaluator.evaluate(found, ground_truths(records))
            result.method, result.protocol = Path(detections_path).stem, "file"
            _print_result(result)
            write_results([result], self.out_dir / "results_file.csv")
            return [result]
        models = self.load_models(method)
        print(f"📊 Evaluating {method} on {len(records)} scenes")
        results, _ = self._evaluate_method(method, models, records)
        if method == "smn":
            self.run_probes(models, records)
        write_results(results, self.out_dir / f"results_{method}.csv")
        return results

    def focus_class(self) -> int:
        """The rule-bound dependent class when rules exist, else class 0."""
        rules = self.config.scene.rules
        return self.config.scene.class_index(rules[0].dependent) if rules else 0

    def compare(self) -> List[EvalResult]:
        records = self.load_split("test")
        gts = ground_truths(records)
        # load every checkpoint before spending time on detection
        models = {method: self.load_models(method) for method in METHODS}
        results: List[EvalResult] = []
        curves = {}
        focus = self.focus_class()
        first = self.config.eval.protocols[0]
        for method in METHODS:
            method_results, detections = self._evaluate_method(method, models[method], records)
            results.extend(method_results)
            curves[method] = self.evaluator.pr_curve(detections[first.name], gts, focus, first.cap)
        write_results(results, self.out_dir / "results.csv")
        write_per_class(results, self.config.scene.classes, self.out_dir / "per_class.csv")
        name = self.config.scene.classes[focus]
        plot_pr_curves(curves, self.out_dir / "plots" / f"pr_{name}.svg", f"{name}, {first.name}")
        print(f"✅ Wrote {len(results)} rows to {self.out_dir / 'results.csv'}")
        return results

    # -- diagnostics ---------------------------------------------------------

    def gradcheck(self, seeds: int = 20, names: Optional[Sequence[str]] = None) -> Dict[str, float]:
        worst = run_suite(range(seeds), names)
        failed = [name for name, error in worst.items() if not error < TOLERANCE]
        for name, error in worst.items():
            print(f"{'❌' if name in failed else '✅'} {name:<26} max relative error {error:.2e}")
        if failed:
            raise NumericalError(f"gradient check failed for {', '.join(failed)} (tolerance {TOLERANCE:g})", op=failed[0])
        return worst

    def _test_record(self, index: int) -> SceneRecord:
        records = self.load_split("test")
        if not 0 <= index < len(records):
            raise DatasetError(f"scene index {index} outside the {len(records)}-scene test split")
        return records[index]

    def explain(self, index: int = 0) -> List[Dict[str, object]]:
        record = self._test_record(index)
        models = self.load_models("smn")
        rollout = self.rollout(models)
        with precision(models.params.dtype):
            trace = rollout.run(record.image)
        path = self.out_dir / f"explain_{index}.jsonl"
        path.write_text(trace.to_jsonl(), encoding="utf-8")
        rows = score_readoff(trace)
        print(f"🔍 Scene {index}: {record.num_instances} instances, {len(rows)} iterations")
        for row in rows:
            marker = "" if row["memory_used"] else " (no memory)"
            print(
                f"   n={row['iteration']:<3} {row['phase']:<5} class {row['class']} box {row['box']} "
                f"base {row['base']:.3f} -> fused {row['fused']:.3f} ({row['delta']:+.3f}){marker}"
            )
        print(f"✅ Wrote the full trace to {path}")
        return rows

    def dump_memory(self, index: int = 0) -> Path:
        record = self._test_record(index)
        models = self.load_models("smn")
        rollout = self.rollout(models)
        with precision(models.params.dtype):
            trace = rollout.hybrid_detect(record.image, keep_snapshots=True)
        folder = self.out_dir / "memory"
        for step, grid in enumerate(trace.snapshots):
            save_tensor(folder / f"scene{index}_n{step}.smnt", grid)
        path = plot_memory(trace.snapshots, folder / f"scene{index}.svg")
        print(f"✅ Dumped {len(trace.snapshots)} memory snapshots to {folder}")
        return path

    def report(self) -> List[Path]:
        rows = read_results(self.out_dir / "results.csv")
        plots = self.out_dir / "plots"
        written = [plot_metric_bars(rows, plots / "ap50.svg", "AP50"), plot_metric_bars(rows, plots / "ar10.svg", "AR10")]
        logs = {}
        for kind in ("base", "smn", "mlp"):
            path = self.out_dir / f"train_{kind}.csv"
            if path.exists():
                logs[kind] = read_loss_log(path)
        if logs:
            written.append(plot_loss_curves(logs, plots / "losses.svg"))
        for path in sorted(self.out_dir.glob("explain_*.jsonl")):
            readoff = score_readoff(read_trace(path))
            written.append(plot_score_readoff(readoff, plots / f"{path.stem}.svg", title=path.stem))
            suppressed = sum(1 for row in readoff if row["delta"] < 0)
            print(f"🔍 {path.name}: {len(readoff)} iterations, memory lowered the confidence in {suppressed}")
        for row in rows:
            print(f"📊 {row['method']:<8} {row['protocol']:<18} AP {row['AP']}  AP50 {row['AP50']}  AR10 {row['AR10']}")
        print(f"✅ Wrote {len(written)} plots to {plots}")
        return written
