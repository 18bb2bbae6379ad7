"""End-to-end runs: split, CV, full-pool retraining, stage-two fit, evaluation.

A run directory is self-describing::

    run.json           run configuration and cohort location
    split.json         held-out test ids, training pool, CV folds
    cv_summary.json    fold AUCs and the epoch budget (CNN runs)
    history_*.jsonl    per-epoch training records (CNN runs)
    cnn.nhck           CNN checkpoint (cnn/hybrid)
    logreg.json        stage-two model (ml/hybrid)
    audit.json         ids whose images were read while training
    metrics.json       held-out evaluation (written by ``evaluate_run``)
    report.txt
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import voltensor as vt
from .cohort import (
    MANIFEST_NAME,
    PhantomSpec,
    Subject,
    crop_region,
    generate_subject,
    load_subject,
    read_manifest,
    write_nifti,
)
from .cohort.phantom import cohort_plan
from .cohort.structures import BRANCHES, diagnosis_label
from .fusion import LogRegModel, fit_logreg, fuse
from .gradcam import PopulationMap, population_average, render_overlay, subject_attention, top_mass_fraction, write_sidecar
from .metrics import INPUT_ROWS, EvalReport, evaluate
from .netarch import (
    ArchitectureConfig,
    ModelCheckpoint,
    auto_chunk,
    build_model,
    extract_features,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .trainer import (
    Dataset,
    SplitPlan,
    TrainConfig,
    cross_validate,
    derive_seed,
    stratified_kfold,
    stratified_split,
    train,
)

log = logging.getLogger(__name__)

# task -> (positive, negative) diagnosis
TASKS = {"psp-vs-pd": ("PSP", "PD"), "msa-vs-pd": ("MSA", "PD"), "psp-vs-msa": ("PSP", "MSA")}
INPUTS = ("volume", "mask", "mri", "mri+mask", "mask+volume", "mri+volume", "mri+mask+volume")
MODEL_KINDS = ("ml", "cnn", "hybrid")


class RunError(RuntimeError):
    """Invalid run configuration or missing artifacts."""


def desk_architecture(**overrides) -> ArchitectureConfig:
    """Default crops, block-averaged by 4 so a full ablation fits on one CPU."""
    return ArchitectureConfig(**{"downsample": 4, **overrides})


def desk_training(**overrides) -> TrainConfig:
    return TrainConfig(**{"max_epochs": 8, **overrides})


@dataclass
class RunConfig:
    task: str
    inputs: str
    model: str
    seed: int = 0
    arch: dict = field(default_factory=lambda: desk_architecture().to_dict())
    training: dict = field(default_factory=lambda: asdict(desk_training()))
    cv_folds: int = 5
    test_fraction: float = 0.2
    l2: float = 1.0
    threshold: float = 0.5
    precision: str = "float32"

    def __post_init__(self):
        if self.task not in TASKS:
            raise RunError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if self.inputs not in INPUTS:
            raise RunError(f"unknown inputs {self.inputs!r}; choose from {INPUTS}")
        if self.model not in MODEL_KINDS:
            raise RunError(f"unknown model kind {self.model!r}; choose from {MODEL_KINDS}")
        parts = set(self.inputs.split("+"))
        imaging = parts & {"mri", "mask"}
        if self.model == "ml" and parts != {"volume"}:
            raise RunError("model 'ml' takes volume input only")
        if self.model == "cnn" and "volume" in parts:
            raise RunError("model 'cnn' takes imaging input only (mri and/or mask)")
        if self.model == "hybrid" and not ("volume" in parts and imaging):
            raise RunError("model 'hybrid' needs volume plus at least one imaging input")

    @property
    def use_mri(self) -> bool:
        return "mri" in self.inputs.split("+")

    @property
    def use_mask(self) -> bool:
        return "mask" in self.inputs.split("+")

    @property
    def imaging(self) -> str:
        return "+".join(m for m in ("mri", "mask") if m in self.inputs.split("+"))

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig.from_dict({**self.arch, "use_mri": self.use_mri, "use_mask": self.use_mask})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- cohort sources


def select_channels(full: np.ndarray, use_mri: bool, use_mask: bool) -> np.ndarray:
    """Pick channels from [N, 1 + n_masks, ...] crops (channel 0 is MRI)."""
    if use_mri and use_mask:
        return full
    return full[:, :1] if use_mri else full[:, 1:]


def subject_crops(subject: Subject, arch: ArchitectureConfig) -> dict[str, np.ndarray]:
    return {
        b: crop_region(subject, b, arch.crop_shapes[b], True, True, arch.downsample, arch.crop_center(b))
        for b in BRANCHES
    }


class CohortSource:
    """Labels and volumes for every subject; crops loaded on demand and audited."""

    def __init__(self):
        self.ids: list[str] = []
        self.diagnosis: dict[str, str] = {}
        self.volumes: dict[str, np.ndarray] = {}
        self.image_reads: set[str] = set()

    def task_subjects(self, task: str) -> tuple[list[str], np.ndarray]:
        pos, neg = TASKS[task]
        ids = [s for s in self.ids if self.diagnosis[s] in (pos, neg)]
        return ids, np.array([1 if self.diagnosis[s] == pos else 0 for s in ids], dtype=int)

    def volume_matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.volumes[s] for s in ids])

    def _crops(self, sid: str, arch: ArchitectureConfig) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def full_inputs(self, ids: Sequence[str], arch: ArchitectureConfig) -> dict[str, np.ndarray]:
        """Crops with every channel (MRI first, then the region's masks)."""
        per = []
        for sid in ids:
            self.image_reads.add(sid)
            per.append(self._crops(sid, arch))
        return {b: np.stack([p[b] for p in per]) for b in BRANCHES}

    def branch_inputs(self, ids: Sequence[str], arch: ArchitectureConfig) -> dict[str, np.ndarray]:
        full = self.full_inputs(ids, arch)
        return {b: select_channels(v, arch.use_mri, arch.use_mask) for b, v in full.items()}

    def subject(self, sid: str) -> Subject:
        raise NotImplementedError


class DiskCohort(CohortSource):
    """Cohort written by ``neurohybrid generate`` (manifest + NIfTI files)."""

    def __init__(self, root):
        super().__init__()
        self.root = Path(root)
        self.rows = {r.subject_id: r for r in read_manifest(self.root / MANIFEST_NAME, self.root)}
        self.ids = list(self.rows)
        self.diagnosis = {s: r.diagnosis for s, r in self.rows.items()}
        self.volumes = {s: np.asarray(r.volumes) for s, r in self.rows.items()}
        self._cache: dict[tuple, dict[str, np.ndarray]] = {}

    def subject(self, sid: str) -> Subject:
        return load_subject(self.rows[sid], self.root)

    def _crops(self, sid, arch):
        key = (sid, arch.downsample, repr(arch.crop_shapes), repr(arch.crop_centers))
        if key not in self._cache:
            self._cache[key] = subject_crops(self.subject(sid), arch)
        return self._cache[key]


class MemoryCohort(CohortSource):
    """Phantom cohort generated on the fly; only crops and volumes are kept."""

    def __init__(self, spec: PhantomSpec, scale: float = 1.0, arch: ArchitectureConfig | None = None,
                 labels: Iterable[str] = ("PD", "PSP", "MSA")):
        super().__init__()
        self.spec = spec
        self.arch = arch or desk_architecture()
        self.plan = {sid: st for sid, st in cohort_plan(scale) if diagnosis_label(st) in tuple(labels)}
        self.crops: dict[str, dict[str, np.ndarray]] = {}
        for sid, subtype in self.plan.items():
            subj = generate_subject(spec, subtype, sid)
            self.ids.append(sid)
            self.diagnosis[sid] = subj.diagnosis
            self.volumes[sid] = subj.volumes
            self.crops[sid] = subject_crops(subj, self.arch)

    def subject(self, sid: str) -> Subject:
        return generate_subject(self.spec, self.plan[sid], sid)

    def _crops(self, sid, arch):
        if (arch.downsample, arch.crop_shapes, arch.crop_centers) == (self.arch.downsample, self.arch.crop_shapes, self.arch.crop_centers):
            return self.crops[sid]
        return subject_crops(self.subject(sid), arch)


# ---------------------------------------------------------------- training


@dataclass
class CNNResult:
    model: ModelCheckpoint
    cv_summary: dict
    histories: list[str]
    final_history: str


def make_split(source: CohortSource, cfg: RunConfig) -> SplitPlan:
    ids, labels = source.task_subjects(cfg.task)
    plan = stratified_split(ids, labels, cfg.test_fraction, derive_seed(cfg.seed, "split", cfg.task))
    label_of = dict(zip(ids, labels))
    pool_labels = [label_of[s] for s in plan.train_ids]
    plan.folds = stratified_kfold(plan.train_ids, pool_labels, cfg.cv_folds, derive_seed(cfg.seed, "kfold", cfg.task))
    return plan


def train_cnn(source: CohortSource, cfg: RunConfig, plan: SplitPlan) -> CNNResult:
    """Cross-validate on the training pool, then retrain on all of it for the CV epoch budget."""
    arch = cfg.architecture()
    ids, labels = source.task_subjects(cfg.task)
    label_of = dict(zip(ids, labels))
    pool = plan.train_ids
    dtype = np.dtype(cfg.precision)
    data = Dataset(source.branch_inputs(pool, arch), np.array([label_of[s] for s in pool]), list(pool))
    tcfg = replace(cfg.train_config(), seed=derive_seed(cfg.seed, "cnn", cfg.task, cfg.imaging))
    cv = cross_validate(data, plan.folds, arch, tcfg, dtype)
    log.info("CV fold AUCs %s, epoch budget %d", np.round(cv.fold_aucs, 4).tolist(), cv.epoch_budget)
    final_cfg = replace(tcfg, max_epochs=cv.epoch_budget)
    model = build_model(arch, derive_seed(tcfg.seed, "final"), dtype)
    model, hist = train(model, data, final_cfg)
    model.metadata.update({"task": cfg.task, "inputs": cfg.imaging, "seed": int(cfg.seed)})
    return CNNResult(model, cv.summary(), [h.to_jsonl() for h in cv.histories], hist.to_jsonl())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _fused_features(source: CohortSource, model: ModelCheckpoint, ids, cfg: RunConfig) -> np.ndarray:
    feats = extract_features(model, source.branch_inputs(ids, cfg.architecture()))
    return fuse(feats, source.volume_matrix(ids))


def train_run(source: CohortSource, cfg: RunConfig, out_dir, cohort_ref: str = "",
              cnn: CNNResult | None = None) -> Path:
    """Train one (task, inputs, model) configuration and write its run directory.

    ``cnn`` may supply an already trained CNN for the same task and imaging
    modality (used by the ablation to share CNNs between rows).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source.image_reads = set()
    plan = make_split(source, cfg)
    ids, labels = source.task_subjects(cfg.task)
    label_of = dict(zip(ids, labels))
    y_pool = np.array([label_of[s] for s in plan.train_ids])

    with vt.precision(cfg.precision):
        if cfg.model in ("cnn", "hybrid"):
            if cnn is None:
                cnn = train_cnn(source, cfg, plan)
            save_checkpoint(cnn.model, out / "cnn.nhck")
            _write_json(out / "cv_summary.json", cnn.cv_summary)
            for i, h in enumerate(cnn.histories):
                (out / f"history_fold{i}.jsonl").write_text(h)
            (out / "history_final.jsonl").write_text(cnn.final_history)
        if cfg.model == "ml":
            lr = fit_logreg(source.volume_matrix(plan.train_ids), y_pool, cfg.l2, "balanced")
        elif cfg.model == "hybrid":
            X = _fused_features(source, cnn.model, plan.train_ids, cfg)
            lr = fit_logreg(X, y_pool, cfg.l2, "balanced")
        if cfg.model in ("ml", "hybrid"):
            (out / "logreg.json").write_text(lr.to_json() + "\n")

    leaked = sorted(source.image_reads & set(plan.test_ids))
    if leaked:
        raise RunError(f"test subjects read during training: {leaked[:5]}")
    _write_json(out / "audit.json", {"training_image_reads": sorted(source.image_reads),
                                     "test_ids": sorted(plan.test_ids), "overlap": leaked})
    (out / "split.json").write_text(plan.to_json() + "\n")
    _write_json(out / "run.json", {"config": cfg.to_dict(), "cohort": cohort_ref})
    return out


def load_run_config(run_dir) -> tuple[RunConfig, str]:
    run_dir = Path(run_dir)
    path = run_dir / "run.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} missing")
    d = json.loads(path.read_text())
    return RunConfig(**d["config"]), d.get("cohort", "")


def run_scores(source: CohortSource, run_dir, ids: Sequence[str]) -> np.ndarray:
    """Scores of a trained run for ``ids``."""
    run_dir = Path(run_dir)
    cfg, _ = load_run_config(run_dir)
    needed = {"ml": ["logreg.json"], "cnn": ["cnn.nhck"], "hybrid": ["cnn.nhck", "logreg.json"]}[cfg.model]
    for name in ["split.json", *needed]:
        if not (run_dir / name).is_file():
            raise FileNotFoundError(f"{run_dir / name} missing")
    if cfg.model == "ml":
        lr = LogRegModel.from_json((run_dir / "logreg.json").read_text())
        return lr.predict_proba(source.volume_matrix(ids))
    model = load_checkpoint(run_dir / "cnn.nhck")
    if cfg.model == "cnn":
        return predict_proba(model, source.branch_inputs(ids, cfg.architecture()))
    lr = LogRegModel.from_json((run_dir / "logreg.json").read_text())
    return lr.predict_proba(_fused_features(source, model, ids, cfg))


def evaluate_run(source: CohortSource, run_dir) -> EvalReport:
    """Score the held-out test ids and write ``metrics.json`` / ``report.txt``."""
    run_dir = Path(run_dir)
    cfg, _ = load_run_config(run_dir)
    if not (run_dir / "split.json").is_file():
        raise FileNotFoundError(f"{run_dir / 'split.json'} missing")
    plan = SplitPlan.from_json((run_dir / "split.json").read_text())
    ids, labels = source.task_subjects(cfg.task)
    label_of = dict(zip(ids, labels))
    y = np.array([label_of[s] for s in plan.test_ids])
    scores = run_scores(source, run_dir, plan.test_ids)
    report = evaluate(y, scores, cfg.task, cfg.model, cfg.inputs, cfg.threshold, TASKS[cfg.task][0])
    d = report.to_dict()
    d["scores"] = {s: float(v) for s, v in zip(plan.test_ids, scores)}
    _write_json(run_dir / "metrics.json", d)
    (run_dir / "report.txt").write_text(format_report(report))
    return report


def format_report(r: EvalReport) -> str:
    def f(v):
        return "undefined" if v is None else f"{v:.4f}"

    cm = r.confusion
    lines = [
        f"task {r.task}  model {r.model}  inputs {r.inputs}  n_test {r.n_test}  threshold {r.threshold}",
        f"sensitivity {f(r.sensitivity)}  specificity {f(r.specificity)}  youden {f(r.youden)}",
        f"auc {f(r.auc)}  f1 {f(r.f1)}  accuracy {f(r.accuracy)}",
        f"confusion (positive = {cm.positive}): tp {cm.tp}  fn {cm.fn}  fp {cm.fp}  tn {cm.tn}",
    ]
    return "\n".join(lines) + "\n"


def run_ablation(source: CohortSource, task: str, out_dir, base: RunConfig | None = None,
                 cohort_ref: str = "") -> dict[tuple[str, str], EvalReport]:
    """Train and evaluate the seven standard (model, inputs) rows; CNNs are shared between rows."""
    base = base or RunConfig(task, "mri+mask", "cnn")
    out = Path(out_dir)
    cnns: dict[str, CNNResult] = {}
    reports = {}
    for kind, inputs in INPUT_ROWS:
        cfg = replace(base, task=task, inputs=inputs, model=kind)
        run_dir = out / f"{kind}-{inputs.replace('+', '_')}"
        if run_dir.exists():
            shutil.rmtree(run_dir)
        shared = None
        if kind in ("cnn", "hybrid"):
            if cfg.imaging not in cnns:
                source.image_reads = set()
                with vt.precision(cfg.precision):
                    cnns[cfg.imaging] = train_cnn(source, cfg, make_split(source, cfg))
            shared = cnns[cfg.imaging]
        train_run(source, cfg, run_dir, cohort_ref, cnn=shared)
        reports[(kind, inputs)] = evaluate_run(source, run_dir)
        log.info("%s %s %s: AUC %s", task, kind, inputs, reports[(kind, inputs)].auc)
    return reports


# ---------------------------------------------------------------- attention maps


# dilation of the midbrain mask for the localization score, in template voxels
LOCALIZATION_RADIUS = 2.0


def dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Voxels within Euclidean distance ``radius`` of ``mask``."""
    if not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


def gradcam_run(source: CohortSource, run_dir, out_dir, subject_ids: Sequence[str] | None = None,
                chunk: int | None = None, target_class: int = 1) -> dict[str, PopulationMap]:
    """Attention maps for ``subject_ids`` (default: the run's test set).

    Writes ``subjects/<id>/<branch>.nii``, ``population_<branch>.nii`` with a
    JSON sidecar, and mid-slice overlays ``population_<branch>_axis<k>.ppm``
    on the mean MRI crop.  The brainstem sidecar also records the share of
    top-5% attention mass inside the midbrain dilated by 2 template voxels.
    ``target_class`` 1 explains the task's positive diagnosis, 0 the negative.
    """
    run_dir, out = Path(run_dir), Path(out_dir)
    cfg, _ = load_run_config(run_dir)
    if cfg.model == "ml":
        raise RunError("no CNN to explain")
    if not (run_dir / "cnn.nhck").is_file():
        raise FileNotFoundError(f"{run_dir / 'cnn.nhck'} missing")
    if subject_ids is None:
        if not (run_dir / "split.json").is_file():
            raise FileNotFoundError(f"{run_dir / 'split.json'} missing")
        subject_ids = SplitPlan.from_json((run_dir / "split.json").read_text()).test_ids
    unknown = [s for s in subject_ids if s not in source.diagnosis]
    if unknown:
        raise KeyError(f"subjects not in cohort: {unknown[:5]}")
    model = load_checkpoint(run_dir / "cnn.nhck")
    arch = model.config
    # the backward pass keeps every unfolded conv input alive
    chunk = chunk or max(1, auto_chunk(arch, model.dtype.itemsize) // 4)
    spacing = (float(arch.downsample),) * 3
    out.mkdir(parents=True, exist_ok=True)
    sums = {b: None for b in BRANCHES}
    anatomy = {b: None for b in BRANCHES}
    midbrain = None
    maps_by_branch: dict[str, list] = {b: [] for b in BRANCHES}
    for start in range(0, len(subject_ids), chunk):
        part = list(subject_ids[start : start + chunk])
        full = source.full_inputs(part, arch)
        batch = {b: select_channels(v, arch.use_mri, arch.use_mask) for b, v in full.items()}
        for sid, maps in zip(part, subject_attention(model, batch, target_class, part)):
            d = out / "subjects" / sid
            d.mkdir(parents=True, exist_ok=True)
            for b, m in maps.items():
                write_nifti(m.upsampled.astype(np.float32), d / f"{b}.nii", spacing)
                maps_by_branch[b].append(m)
        for b in BRANCHES:
            mri = full[b][:, 0].astype(np.float64).sum(axis=0)
            anatomy[b] = mri if anatomy[b] is None else anatomy[b] + mri
        mb = (full["brainstem"][:, 1] > 0.5).any(axis=0)  # midbrain is the first brainstem mask
        midbrain = mb if midbrain is None else midbrain | mb
    pops = {}
    for b in BRANCHES:
        pop = population_average(maps_by_branch[b])
        pops[b] = pop
        write_nifti(pop.mean.astype(np.float32), out / f"population_{b}.nii", spacing)
        extra = {}
        if b == "brainstem":
            region = dilate(midbrain, LOCALIZATION_RADIUS / arch.downsample)
            extra["midbrain_top5_fraction"] = top_mass_fraction(pop.mean, region)
        write_sidecar(out / f"population_{b}.json", b, target_class, pop.count, pop.mean,
                      subjects=list(subject_ids), **extra)
        anat = anatomy[b] / len(subject_ids)
        for axis in range(3):
            render_overlay(pop.mean, anat, axis, anat.shape[axis] // 2, out / f"population_{b}_axis{axis}.ppm")
    return pops
