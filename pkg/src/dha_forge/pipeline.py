"""Pipeline configuration and the stage functions behind the command line.

Stages run in order and hand over through files::

    generate  data/records.csv, records.jsonl, schema.json, rejections.csv
    prepare   data/prompts.jsonl, split.json, vocab.jsonl, label_frequencies.json
    train     checkpoints/model.safetensors, train_log.jsonl
    eval      checkpoints/tfidf_baseline.json, reports/metrics.{json,csv}, confusion_*.csv
    shift     reports/probs_*.csv, shift_*.{csv,svg}, scenarios.json
    report    reports/run_manifest.json, reports/summary.md

Every stage also writes ``reports/manifests/<stage>.json`` recording the
config hash and the sha256 of each input and output file.  Files are written
to a temporary name and renamed into place only after the whole stage has
succeeded.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .baselines import LinearConfig, linear_fit, tfidf_fit, tfidf_matrix
from .crashdata import (ConfigError, CrashRecord, GeneratorConfig, filter_record,
                        generate_pairs, read_records_csv, records_to_csv, records_to_jsonl,
                        rejections_to_csv, schema_document)
from .labels import LABEL_ORDER, NarrativeLabel
from .metrics import confusion, confusion_to_csv, report, reports_to_csv, reports_to_json
from .model import LoraConfig, MicroLM, ModelConfig, load_checkpoint, lora_wrap, save_checkpoint
from .narrative import (SplitManifest, label_frequencies, narratives_from_records,
                        render_prompt, split)
from .shift import (Scenario, ScenarioKind, collect_probabilities, delta_metrics, perturb,
                    report_to_csv, report_to_svg, summarize)
from .tokenizer import Vocab, build_vocab, encode_prompt
from .train import TrainConfig, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_UNPAIRED = 4
EXIT_MISSING = 5


class PipelineError(Exception):
    exit_code = EXIT_FAILURE


class ArtifactExistsError(PipelineError):
    exit_code = EXIT_IO


class ArtifactIOError(PipelineError):
    exit_code = EXIT_IO


class UnpairedRecordsError(PipelineError):
    exit_code = EXIT_UNPAIRED

    def __init__(self, crash_ids):
        self.crash_ids = list(crash_ids)
        shown = ", ".join(self.crash_ids[:20])
        more = f" (+{len(self.crash_ids) - 20} more)" if len(self.crash_ids) > 20 else ""
        super().__init__(f"{len(self.crash_ids)} crash ids without exactly two driver rows: "
                         f"{shown}{more}")


class MissingArtifactError(PipelineError):
    exit_code = EXIT_MISSING


# -- configuration -----------------------------------------------------------

@dataclass
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class ScenarioSeeds:
    single_driver_seed: int = 0
    teen_seed: int = 0


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split_seed: int = 0
    vocab_max_size: int = 4096
    model: dict = field(default_factory=dict)  # ModelConfig fields except vocab_size
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: LinearConfig = field(default_factory=LinearConfig)
    scenarios: ScenarioSeeds = field(default_factory=ScenarioSeeds)
    eval_batch_size: int = 128

    SEED_FIELDS = ("generator.seed", "split_seed", "model.seed", "lora.seed", "train.seed",
                   "baseline.seed", "scenarios.single_driver_seed", "scenarios.teen_seed")

    def to_json(self) -> dict:
        out = asdict(self)
        out["generator"] = self.generator.to_json()
        out["train"]["betas"] = list(self.train.betas)
        out["baseline"]["l2_grid"] = list(self.baseline.l2_grid)
        return out

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def validate(self) -> None:
        data = self.to_json()
        for dotted in self.SEED_FIELDS:
            value = _lookup(data, dotted)
            if value is None and dotted == "model.seed":
                continue
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError(f"{dotted}: expected a non-negative integer seed, got {value!r}")
        for dotted in ("vocab_max_size", "eval_batch_size"):
            value = _lookup(data, dotted)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{dotted}: expected a positive integer, got {value!r}")
        for name, value in asdict(self.paths).items():
            if not isinstance(value, str) or not value:
                raise ConfigError(f"paths.{name}: expected a non-empty path string")
        try:
            self.generator.validate()
        except ConfigError as exc:
            raise ConfigError(f"generator: {exc}") from None
        try:
            self.model_config(vocab_size=4096).validate()
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None
        if not isinstance(self.lora.rank, int) or self.lora.rank < 1:
            raise ConfigError(f"lora.rank: expected a positive integer, got {self.lora.rank!r}")
        self.train.validate()

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


def _lookup(data: Mapping, dotted: str) -> Any:
    node: Any = data
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return None
        node = node[part]
    return node


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_json(data: Mapping[str, Any]) -> PipelineConfig:
    """Build and validate a config; missing sections take their defaults."""
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kw: dict[str, Any] = {}
    if "paths" in data:
        kw["paths"] = _build(Paths, data["paths"], "paths")
    if "generator" in data:
        if not isinstance(data["generator"], Mapping):
            raise ConfigError("generator: expected an object")
        kw["generator"] = GeneratorConfig.from_json(data["generator"])
    if "model" in data:
        model = dict(data["model"]) if isinstance(data["model"], Mapping) else None
        if model is None:
            raise ConfigError("model: expected an object")
        allowed = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        if set(model) - allowed:
            raise ConfigError(f"model: unknown fields {sorted(set(model) - allowed)}")
        kw["model"] = model
    if "lora" in data:
        kw["lora"] = _build(LoraConfig, data["lora"], "lora")
    if "train" in data:
        train_data = dict(data["train"]) if isinstance(data["train"], Mapping) else data["train"]
        if isinstance(train_data, dict) and "betas" in train_data:
            train_data["betas"] = tuple(train_data["betas"])
        kw["train"] = _build(TrainConfig, train_data, "train")
    if "baseline" in data:
        base_data = dict(data["baseline"]) if isinstance(data["baseline"], Mapping) else data["baseline"]
        if isinstance(base_data, dict) and "l2_grid" in base_data:
            base_data["l2_grid"] = tuple(base_data["l2_grid"])
        kw["baseline"] = _build(LinearConfig, base_data, "baseline")
    if "scenarios" in data:
        kw["scenarios"] = _build(ScenarioSeeds, data["scenarios"], "scenarios")
    for name in ("split_seed", "vocab_max_size", "eval_batch_size"):
        if name in data:
            kw[name] = data[name]
    cfg = PipelineConfig(**kw)
    cfg.validate()
    return cfg


def apply_overrides(data: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    out = copy.deepcopy(data)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part!r} is not a section")
        node[parts[-1]] = value
    return out


def override_seeds(data: dict, seed: int) -> dict:
    out = copy.deepcopy(data)
    for dotted in PipelineConfig.SEED_FIELDS:
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = seed
    return out


def default_config_json() -> dict:
    return PipelineConfig().to_json()


# -- file plumbing -----------------------------------------------------------

def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StagedWriter:
    """Collects a stage's outputs in temporary files and renames them into place on commit."""

    def __init__(self, force: bool):
        self.force = force
        self.pending: list[tuple[Path, Path]] = []

    def check(self, targets) -> None:
        if self.force:
            return
        existing = [str(p) for p in targets if Path(p).exists()]
        if existing:
            raise ArtifactExistsError(
                "refusing to overwrite existing output (use --force): " + ", ".join(existing))

    def _temp(self, target: Path) -> Path:
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {target}: {exc}") from exc
        os.close(fd)
        self.pending.append((Path(name), target))
        return Path(name)

    def text(self, target: Path, content: str) -> None:
        tmp = self._temp(target)
        tmp.write_text(content, encoding="utf-8")

    def via(self, target: Path, writer: Callable[[Path], None]) -> None:
        writer(self._temp(target))

    def commit(self) -> None:
        for tmp, target in self.pending:
            os.replace(tmp, target)
        self.pending.clear()

    def abort(self) -> None:
        for tmp, _ in self.pending:
            tmp.unlink(missing_ok=True)
        self.pending.clear()


@dataclass
class Run:
    """A configured pipeline rooted at a directory."""

    config: PipelineConfig
    root: Path
    force: bool = False

    @property
    def data_dir(self) -> Path:
        return self.root / self.config.paths.data_dir

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / self.config.paths.checkpoint_dir

    @property
    def report_dir(self) -> Path:
        return self.root / self.config.paths.report_dir

    def manifest_path(self, stage: str) -> Path:
        return self.report_dir / "manifests" / f"{stage}.json"

    def rel(self, path: Path) -> str:
        return Path(os.path.relpath(path, self.root)).as_posix()

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.is_file():
                raise MissingArtifactError(f"missing upstream artifact: {p}")

    def stage(self, name: str, inputs: list[Path], outputs: list[Path],
              body: Callable[[StagedWriter], dict | None]) -> dict:
        """Run ``body`` with a staged writer, then write the stage manifest and commit."""
        self.require(*inputs)
        writer = StagedWriter(self.force)
        manifest_path = self.manifest_path(name)
        writer.check(outputs + [manifest_path])
        try:
            summary = body(writer) or {}
            staged = {target: tmp for tmp, target in writer.pending}
            manifest = {
                "stage": name,
                "config_hash": self.config.hash(),
                "inputs": {self.rel(p): sha256_file(p) for p in inputs},
                "outputs": {self.rel(t): sha256_file(staged[t]) for t in sorted(staged)},
                "summary": summary,
            }
            writer.text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            writer.commit()
        except BaseException:
            writer.abort()
            raise
        log.info("%s: wrote %d files", name, len(manifest["outputs"]) + 1)
        return manifest


# -- stage helpers ------------------------------------------------------------

def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_records(path: Path) -> list[CrashRecord]:
    records, _ = read_records_csv(path)
    return records


def _load_prompts(run: Run) -> tuple[list[dict], SplitManifest, Vocab]:
    prompts = _read_jsonl(run.data_dir / "prompts.jsonl")
    manifest = SplitManifest.load(run.data_dir / "split.json")
    vocab = Vocab.load(run.data_dir / "vocab.jsonl")
    return prompts, manifest, vocab


def _split_rows(prompts: list[dict], manifest: SplitManifest, part: str) -> list[dict]:
    by_id = {p["crash_id"]: p for p in prompts}
    return [by_id[i] for i in getattr(manifest, part)]


def _encoded(rows: list[dict], vocab: Vocab) -> list[tuple[list[int], int]]:
    return [(encode_prompt(r["system"], r["user"], vocab), NarrativeLabel(r["label"]).index)
            for r in rows]


# -- stages --------------------------------------------------------------------

def cmd_generate(run: Run) -> dict:
    d = run.data_dir
    outputs = [d / "records.csv", d / "records.jsonl", d / "schema.json", d / "rejections.csv"]

    def body(w: StagedWriter) -> dict:
        kept, rejected = [], []
        for r1, r2, _ in generate_pairs(run.config.generator):
            for rec in (r1, r2):
                result = filter_record(rec.to_row())
                (kept if isinstance(result, CrashRecord) else rejected).append(result)
        w.text(d / "records.csv", records_to_csv(kept))
        w.text(d / "records.jsonl", records_to_jsonl(kept))
        w.text(d / "schema.json", json.dumps(schema_document(), indent=2, sort_keys=True) + "\n")
        w.text(d / "rejections.csv", rejections_to_csv(rejected))
        return {"records": len(kept), "rejected": len(rejected)}

    return run.stage("generate", [], outputs, body)


def cmd_prepare(run: Run) -> dict:
    d = run.data_dir
    records_path = d / "records.csv"
    inputs = [records_path, run.manifest_path("generate")]
    outputs = [d / "prompts.jsonl", d / "split.json", d / "vocab.jsonl",
               d / "label_frequencies.json"]

    def body(w: StagedWriter) -> dict:
        narratives, unpaired = narratives_from_records(_load_records(records_path))
        if unpaired:
            raise UnpairedRecordsError(unpaired)
        manifest = split([n.crash_id for n in narratives], run.config.split_seed)
        part_of = {}
        for part in ("train", "eval", "test"):
            for cid in getattr(manifest, part):
                part_of[cid] = part
        lines = []
        for n in narratives:
            p = render_prompt(n)
            lines.append(json.dumps({"crash_id": n.crash_id, "split": part_of[n.crash_id],
                                     "label": n.label.value, "system": p.system, "user": p.user,
                                     "assistant_target": p.assistant_target}, sort_keys=True))
        by_id = {n.crash_id: n for n in narratives}
        train_texts = []
        for cid in manifest.train:
            p = render_prompt(by_id[cid])
            train_texts.append(p.system + "\n" + p.user)
        vocab = build_vocab(train_texts, run.config.vocab_max_size)
        freqs = {"all": label_frequencies(narratives)}
        for part in ("train", "eval", "test"):
            freqs[part] = label_frequencies([by_id[c] for c in getattr(manifest, part)])
        w.text(d / "prompts.jsonl", "\n".join(lines) + ("\n" if lines else ""))
        w.text(d / "split.json", json.dumps(manifest.to_json()) + "\n")
        w.via(d / "vocab.jsonl", vocab.save)
        w.text(d / "label_frequencies.json", json.dumps(freqs, indent=2) + "\n")
        return {"narratives": len(narratives), "vocab_size": vocab.size,
                "split": [len(manifest.train), len(manifest.eval), len(manifest.test)],
                "label_frequencies": freqs["all"]}

    return run.stage("prepare", inputs, outputs, body)


def cmd_train(run: Run) -> dict:
    d, c = run.data_dir, run.checkpoint_dir
    inputs = [d / "prompts.jsonl", d / "split.json", d / "vocab.jsonl", run.manifest_path("prepare")]
    outputs = [c / "model.safetensors", c / "train_log.jsonl"]

    def body(w: StagedWriter) -> dict:
        import torch

        from .train import lr_at

        prompts, manifest, vocab = _load_prompts(run)
        train_set = _encoded(_split_rows(prompts, manifest, "train"), vocab)
        eval_set = _encoded(_split_rows(prompts, manifest, "eval"), vocab)
        torch.manual_seed(run.config.train.seed)
        model = MicroLM(run.config.model_config(vocab.size), vocab.class_ids)
        lora_wrap(model, run.config.lora)
        base_before = model.base_fingerprint()
        result = train(model, train_set, run.config.train, eval_set=eval_set)
        if model.base_fingerprint() != base_before:
            raise PipelineError("base weights changed during adapter training")
        lrs = [lr_at(s, run.config.train) for s in range(len(result.losses))]
        w.via(c / "model.safetensors",
              lambda p: save_checkpoint(model, p, vocab.fingerprint(),
                                        {"config_hash": run.config.hash()}))
        w.text(c / "train_log.jsonl", result.log_lines(lrs))
        return {"steps": len(result.losses),
                "final_loss": result.losses[-1] if result.losses else None,
                "eval_accuracy": result.eval_accuracy,
                "best_step": result.best_step}

    return run.stage("train", inputs, outputs, body)


def _checkpoint(run: Run, vocab: Vocab) -> MicroLM:
    model, info = load_checkpoint(run.checkpoint_dir / "model.safetensors")
    if info["vocab_hash"] != vocab.fingerprint():
        raise ArtifactIOError("checkpoint was trained with a different vocabulary; rerun train")
    return model


def cmd_eval(run: Run) -> dict:
    d, c, r = run.data_dir, run.checkpoint_dir, run.report_dir
    inputs = [d / "prompts.jsonl", d / "split.json", d / "vocab.jsonl",
              c / "model.safetensors", run.manifest_path("train")]
    outputs = [c / "tfidf_baseline.json", r / "metrics.json", r / "metrics.csv",
               r / "confusion_microlm.csv", r / "confusion_tfidf.csv", r / "predictions.csv"]

    def body(w: StagedWriter) -> dict:
        from .shift import pad_batch

        prompts, manifest, vocab = _load_prompts(run)
        train_rows = _split_rows(prompts, manifest, "train")
        eval_rows = _split_rows(prompts, manifest, "eval")
        test_rows = _split_rows(prompts, manifest, "test")
        y_test = [NarrativeLabel(row["label"]).index for row in test_rows]

        model = _checkpoint(run, vocab)
        seqs = [encode_prompt(row["system"], row["user"], vocab) for row in test_rows]
        bs = run.config.eval_batch_size
        probs = [model.class_distribution(*pad_batch(seqs[i:i + bs]))
                 for i in range(0, len(seqs), bs)]
        lm_pred = np.concatenate(probs).argmax(1) if probs else np.zeros(0, dtype=int)

        tfidf = tfidf_fit([row["user"] for row in train_rows])
        clf = linear_fit(tfidf_matrix([row["user"] for row in train_rows], tfidf),
                         [NarrativeLabel(row["label"]).index for row in train_rows],
                         run.config.baseline,
                         tfidf_matrix([row["user"] for row in eval_rows], tfidf),
                         [NarrativeLabel(row["label"]).index for row in eval_rows])
        base_pred = clf.predict(tfidf_matrix([row["user"] for row in test_rows], tfidf)).argmax(1)

        cm_lm, cm_base = confusion(y_test, lm_pred), confusion(y_test, base_pred)
        reports = {"MicroLM-LoRA": report(cm_lm), "TFIDF-Softmax": report(cm_base)}
        baseline_doc = {"tfidf": tfidf.to_json(), "classifier": clf.to_json()}
        w.text(c / "tfidf_baseline.json", json.dumps(baseline_doc, sort_keys=True) + "\n")
        w.text(r / "metrics.json", reports_to_json(reports))
        w.text(r / "metrics.csv", reports_to_csv(reports))
        w.text(r / "confusion_microlm.csv", confusion_to_csv(cm_lm))
        w.text(r / "confusion_tfidf.csv", confusion_to_csv(cm_base))
        rows = ["crash_id,label,microlm,tfidf"] + [
            f"{row['crash_id']},{row['label']},{LABEL_ORDER[a].value},{LABEL_ORDER[b].value}"
            for row, a, b in zip(test_rows, lm_pred, base_pred)]
        w.text(r / "predictions.csv", "\n".join(rows) + "\n")
        return {name: {"accuracy": rep.accuracy, "macro_f1": rep.macro.f1}
                for name, rep in reports.items()}

    return run.stage("eval", inputs, outputs, body)


SCENARIO_FILES = {
    ScenarioKind.SINGLE_DRIVER_DISTRACTION: "single_driver_distraction",
    ScenarioKind.BOTH_DRIVER_DISTRACTION: "both_driver_distraction",
    ScenarioKind.TEEN_DRIVERS: "teen_drivers",
}


def scenarios_for(cfg: PipelineConfig) -> list[Scenario]:
    s = cfg.scenarios
    return [Scenario(ScenarioKind.SINGLE_DRIVER_DISTRACTION, s.single_driver_seed),
            Scenario(ScenarioKind.BOTH_DRIVER_DISTRACTION, 0),
            Scenario(ScenarioKind.TEEN_DRIVERS, s.teen_seed)]


def cmd_shift(run: Run) -> dict:
    d, c, r = run.data_dir, run.checkpoint_dir, run.report_dir
    inputs = [d / "records.csv", d / "split.json", d / "vocab.jsonl", c / "model.safetensors",
              run.manifest_path("train")]
    outputs = [r / "probs_baseline.csv", r / "scenarios.json"]
    for stem in SCENARIO_FILES.values():
        outputs += [r / f"probs_{stem}.csv", r / f"shift_{stem}.csv", r / f"shift_{stem}.svg"]

    def body(w: StagedWriter) -> dict:
        vocab = Vocab.load(d / "vocab.jsonl")
        manifest = SplitManifest.load(d / "split.json")
        narratives, unpaired = narratives_from_records(_load_records(d / "records.csv"))
        if unpaired:
            raise UnpairedRecordsError(unpaired)
        by_id = {n.crash_id: n for n in narratives}
        test = [by_id[i] for i in manifest.test]
        model = _checkpoint(run, vocab)
        bs = run.config.eval_batch_size
        base = collect_probabilities(model, test, vocab, bs)
        base_summary = summarize(base)
        w.text(r / "probs_baseline.csv", base.to_csv())
        summary, scenario_docs = {}, []
        for scenario in scenarios_for(run.config):
            stem = SCENARIO_FILES[scenario.kind]
            sample = collect_probabilities(model, perturb(test, scenario), vocab, bs)
            rep = delta_metrics(base_summary, summarize(sample), scenario.kind.value, "baseline")
            w.text(r / f"probs_{stem}.csv", sample.to_csv())
            w.text(r / f"shift_{stem}.csv", report_to_csv(rep))
            w.text(r / f"shift_{stem}.svg", report_to_svg(rep))
            scenario_docs.append({**scenario.to_json(), "source_split": "test"})
            summary[scenario.kind.value] = {
                e.label.value: {"delta_med": e.delta_med, "delta_iqr": e.delta_iqr}
                for e in rep.entries}
        w.text(r / "scenarios.json", json.dumps(scenario_docs, indent=2) + "\n")
        return summary

    return run.stage("shift", inputs, outputs, body)


STAGES = ("generate", "prepare", "train", "eval", "shift")


def cmd_report(run: Run) -> dict:
    """Gather stage manifests into one run manifest plus a short Markdown summary."""
    r = run.report_dir
    manifests = {}
    for stage in STAGES:
        path = run.manifest_path(stage)
        if not path.is_file():
            raise MissingArtifactError(f"missing upstream artifact: {path}")
        manifests[stage] = json.loads(path.read_text(encoding="utf-8"))
    stale = [s for s, m in manifests.items() if m["config_hash"] != run.config.hash()]
    if stale:
        raise ArtifactIOError(f"stages {stale} were produced with a different config; rerun them")
    outputs = [r / "run_manifest.json", r / "summary.md"]
    writer = StagedWriter(run.force)
    writer.check(outputs)
    artifacts = {}
    for m in manifests.values():
        artifacts.update(m["outputs"])
    doc = {"config": run.config.to_json(), "config_hash": run.config.hash(),
           "stages": {s: m["summary"] for s, m in manifests.items()}, "artifacts": artifacts}
    lines = ["# Run summary", "", f"config hash `{run.config.hash()}`", "",
             "| model | accuracy | macro F1 |", "|---|---|---|"]
    for name, vals in manifests["eval"]["summary"].items():
        lines.append(f"| {name} | {vals['accuracy']:.4f} | {vals['macro_f1']:.4f} |")
    lines += ["", "Metric table: `metrics.csv`. Shift reports: `shift_*.csv` and `shift_*.svg`.", ""]
    try:
        writer.text(outputs[0], json.dumps(doc, indent=2, sort_keys=True) + "\n")
        writer.text(outputs[1], "\n".join(lines))
        writer.commit()
    except BaseException:
        writer.abort()
        raise
    return doc


COMMANDS: dict[str, Callable[[Run], dict]] = {
    "generate": cmd_generate, "prepare": cmd_prepare, "train": cmd_train,
    "eval": cmd_eval, "shift": cmd_shift, "report": cmd_report,
}
