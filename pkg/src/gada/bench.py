"""Experiment harness: named variants, config files, the command line.

A variant is a frozen assignment of loss toggles, so the ablation names mean
the same thing in every output:

  source_only   classification only
  dann          + domain alignment
  dann_e        + domain alignment + entropy
  dann_v        + domain alignment + adversarial smoothing
  dann_u        + domain alignment + fictitious-class generator
  vada          domain alignment + entropy + adversarial smoothing
  gada          vada + fictitious-class generator
  gada_dirtt    gada, then target-only refinement

Config files are UTF-8 text, one ``key = value`` per line, ``#`` starting a
comment line, dotted keys grouping sections: ``data.*`` describes the shift
benchmark (or CSV paths), ``hyper.*`` the training recipe, ``run.*`` the
orchestration (variant, seeds, output directory).  Every metrics document
echoes enough of this to re-run the experiment byte-identically.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from gada.autodiff import ContractError, Tensor, grad_check
from gada.data import (
    CsvParseError,
    DomainShiftDataset,
    ShiftSpec,
    gen_blobs_shift,
    gen_two_moons_shift,
    load_csv,
    save_csv,
)
from gada.losses import (
    VatConfig,
    class_distribution,
    loss_classification,
    loss_domain,
    loss_entropy,
    loss_feature_matching,
    loss_unsupervised,
    loss_vat,
    vat_perturbation,
)
from gada.nets import (
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    NetSpec,
    forward_classifier,
    forward_generator,
)
from gada.rngstreams import site_rng
from gada.trainer import (
    HyperParams,
    TrainingAbort,
    TrainState,
    _prep,
    dirtt_refine,
    evaluate,
    hp_from_dict,
    hp_to_dict,
    load_checkpoint,
    save_checkpoint,
    train,
)

VARIANT_TOGGLES = {
    "source_only": dict(use_domain=False, use_entropy=False, use_vat=False,
                        use_unsupervised=False),
    "dann": dict(use_domain=True, use_entropy=False, use_vat=False,
                 use_unsupervised=False),
    "dann_e": dict(use_domain=True, use_entropy=True, use_vat=False,
                   use_unsupervised=False),
    "dann_v": dict(use_domain=True, use_entropy=False, use_vat=True,
                   use_unsupervised=False),
    "dann_u": dict(use_domain=True, use_entropy=False, use_vat=False,
                   use_unsupervised=True),
    "vada": dict(use_domain=True, use_entropy=True, use_vat=True,
                 use_unsupervised=False),
    "gada": dict(use_domain=True, use_entropy=True, use_vat=True,
                 use_unsupervised=True),
    "gada_dirtt": dict(use_domain=True, use_entropy=True, use_vat=True,
                       use_unsupervised=True),
}

REFINED_VARIANTS = ("gada_dirtt",)


def apply_variant(hp: HyperParams, variant: str) -> HyperParams:
    """The hyperparameters with the variant's toggle assignment imposed.

    Weights of fully disabled terms are zeroed too, so the config echo shows
    the wiring at a glance (source_only reads lambda_d=lambda_s=lambda_t=
    lambda_u=0).  lambda_t serves both the smoothing and entropy target
    terms, so it survives when either is on.
    """
    if variant not in VARIANT_TOGGLES:
        raise ContractError(
            "unknown variant %r; choose from %s"
            % (variant, ", ".join(sorted(VARIANT_TOGGLES))))
    hp = replace(hp, **VARIANT_TOGGLES[variant])
    w = hp.weights
    return replace(hp, weights=replace(
        w,
        lambda_d=w.lambda_d if hp.use_domain else 0.0,
        lambda_u=w.lambda_u if hp.use_unsupervised else 0.0,
        lambda_s=w.lambda_s if hp.use_vat else 0.0,
        lambda_t=w.lambda_t if (hp.use_vat or hp.use_entropy) else 0.0))


@dataclass
class ExperimentConfig:
    """One benchmark recipe: data source, training recipe, run plan."""

    hyper: HyperParams
    variant: str = "gada"
    seeds: tuple = (0,)
    out_dir: str = "runs"
    data: ShiftSpec | None = None
    csv_paths: dict | None = None
    ablate_variants: tuple = tuple(sorted(VARIANT_TOGGLES))
    export_n: int = 200

    def __post_init__(self):
        if self.variant not in VARIANT_TOGGLES:
            raise ContractError("unknown variant %r" % self.variant)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ContractError("seed list must be nonempty")
        if (self.data is None) == (self.csv_paths is None):
            raise ContractError(
                "exactly one of data spec and csv paths must be given")
        self.ablate_variants = tuple(self.ablate_variants)
        for v in self.ablate_variants:
            if v not in VARIANT_TOGGLES:
                raise ContractError("unknown variant %r" % v)
        if self.export_n < 1:
            raise ContractError("export_n must be positive")


_CSV_KEYS = ("source_x", "source_y", "target_x", "test_x", "test_y")


def make_dataset(config: ExperimentConfig, seed: int) -> DomainShiftDataset:
    """The dataset for one run; generated families re-draw under the run seed."""
    if config.csv_paths is not None:
        missing = [k for k in _CSV_KEYS if k not in config.csv_paths]
        if missing:
            raise ContractError("csv paths missing %s" % ", ".join(missing))
        sx, sy = load_csv(config.csv_paths["source_x"],
                          config.csv_paths["source_y"])
        tx, _ = load_csv(config.csv_paths["target_x"])
        ex, ey = load_csv(config.csv_paths["test_x"],
                          config.csv_paths["test_y"])
        K = int(max(sy.max(), ey.max()))
        return DomainShiftDataset(
            source_x=sx, source_y=sy, target_x=tx, test_x=ex, test_y=ey,
            K=K, d=sx.shape[1],
            provenance="csv:%s" % config.csv_paths["source_x"])
    spec = replace(config.data, seed=seed)
    if spec.family == "two_moons":
        return gen_two_moons_shift(spec)
    return gen_blobs_shift(spec)


# -- config files -------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    """``key = value`` lines to a flat string dict; # lines are comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(
                "config line %d: expected 'key = value', got %r"
                % (lineno, raw))
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ContractError(
                "config line %d: empty key or value" % lineno)
        if key in out:
            raise ContractError(
                "config line %d: duplicate key %r" % (lineno, key))
        out[key] = value
    return out


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "yes", "1"):
        return True
    if value.lower() in ("false", "no", "0"):
        return False
    raise ContractError("expected a boolean, got %r" % value)


def _parse_int_list(value: str) -> tuple:
    return tuple(int(part.strip()) for part in value.split(",") if part.strip())


_DATA_FIELDS = {
    "family": str,
    "angle_deg": float,
    "translate_x": float,
    "translate_y": float,
    "scale": float,
    "noise_sigma": float,
    "n_source": int,
    "n_target": int,
    "n_test": int,
    "K": int,
    "seed": int,
}

_HYPER_BOOL = ("instance_norm", "use_domain", "use_entropy", "use_vat",
               "use_unsupervised")
_HYPER_INT = ("batch_size", "steps", "vat_power_iterations", "dirt_steps",
              "dirt_refresh_interval", "K", "d_z", "seed", "eval_interval")
_HYPER_LIST = ("g_hidden", "h_hidden", "disc_hidden", "gen_hidden")
_HYPER_STR = ("disc_tap",)


def config_from_keys(kv: dict) -> ExperimentConfig:
    """Typed ExperimentConfig from the flat key=value
    mapping of a config file."""
    kv = dict(kv)
    hyper_kv = hp_to_dict(HyperParams())
    for name in list(hyper_kv):
        key = "hyper.%s" % name
        if key not in kv:
            continue
        raw = kv.pop(key)
        if name in _HYPER_BOOL:
            hyper_kv[name] = _parse_bool(raw)
        elif name in _HYPER_INT:
            hyper_kv[name] = int(raw)
        elif name in _HYPER_LIST:
            hyper_kv[name] = list(_parse_int_list(raw))
        elif name in _HYPER_STR:
            hyper_kv[name] = raw
        else:
            hyper_kv[name] = float(raw)
    hyper = hp_from_dict(hyper_kv)

    data = None
    csv_paths = None
    if kv.get("data.family") == "csv":
        kv.pop("data.family")
        csv_paths = {}
        for name in _CSV_KEYS:
            key = "data.csv_%s" % name
            if key not in kv:
                raise ContractError("csv data needs %s" % key)
            csv_paths[name] = kv.pop(key)
    else:
        spec_kw = {}
        translate = [0.0, 0.0]
        for name, conv in _DATA_FIELDS.items():
            key = "data.%s" % name
            if key not in kv:
                continue
            raw = kv.pop(key)
            if name == "translate_x":
                translate[0] = float(raw)
            elif name == "translate_y":
                translate[1] = float(raw)
            else:
                spec_kw[name] = conv(raw)
        spec_kw["translate"] = tuple(translate)
        data = ShiftSpec(**spec_kw)

    run_kw = {}
    if "run.variant" in kv:
        run_kw["variant"] = kv.pop("run.variant")
    if "run.seeds" in kv:
        run_kw["seeds"] = _parse_int_list(kv.pop("run.seeds"))
    if "run.out_dir" in kv:
        run_kw["out_dir"] = kv.pop("run.out_dir")
    if "run.variants" in kv:
        run_kw["ablate_variants"] = tuple(
            part.strip() for part in kv.pop("run.variants").split(",")
            if part.strip())
    if "run.export_n" in kv:
        run_kw["export_n"] = int(kv.pop("run.export_n"))
    if kv:
        raise ContractError(
            "unknown config keys: %s" % ", ".join(sorted(kv)))
    return ExperimentConfig(hyper=hyper, data=data, csv_paths=csv_paths,
                            **run_kw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as err:
        raise ContractError("cannot read config %s: %s" % (path, err))
    return config_from_keys(parse_config_text(text))


def render_config(config: ExperimentConfig) -> str:
    """Config-file text that parses back to an equal ExperimentConfig."""
    lines = []
    if config.csv_paths is not None:
        lines.append("data.family = csv")
        for name in _CSV_KEYS:
            lines.append("data.csv_%s = %s" % (name, config.csv_paths[name]))
    else:
        spec = config.data
        lines.append("data.family = %s" % spec.family)
        lines.append("data.angle_deg = %r" % spec.angle_deg)
        lines.append("data.translate_x = %r" % spec.translate[0])
        lines.append("data.translate_y = %r" % spec.translate[1])
        lines.append("data.scale = %r" % spec.scale)
        lines.append("data.noise_sigma = %r" % spec.noise_sigma)
        lines.append("data.n_source = %d" % spec.n_source)
        lines.append("data.n_target = %d" % spec.n_target)
        lines.append("data.n_test = %d" % spec.n_test)
        lines.append("data.K = %d" % spec.K)
        lines.append("data.seed = %d" % spec.seed)
    for name, value in sorted(hp_to_dict(config.hyper).items()):
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, list):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append("hyper.%s = %s" % (name, rendered))
    lines.append("run.variant = %s" % config.variant)
    lines.append("run.seeds = %s" % ",".join(str(s) for s in config.seeds))
    lines.append("run.out_dir = %s" % config.out_dir)
    lines.append("run.variants = %s" % ",".join(config.ablate_variants))
    lines.append("run.export_n = %d" % config.export_n)
    return "\n".join(lines) + "\n"


# -- orchestration ------------------------------------------------------------


def _data_echo(config: ExperimentConfig) -> dict:
    if config.csv_paths is not None:
        return {"family": "csv", **{"csv_%s" % k: v
                                    for k, v in sorted(config.csv_paths.items())}}
    spec = config.data
    return {
        "family": spec.family, "angle_deg": spec.angle_deg,
        "translate": list(spec.translate), "scale": spec.scale,
        "noise_sigma": spec.noise_sigma, "n_source": spec.n_source,
        "n_target": spec.n_target, "n_test": spec.n_test, "K": spec.K,
        "seed": spec.seed,
    }


def _run_one(config: ExperimentConfig, variant: str, seed: int):
    """Train (and refine, for refined variants) one cell; returns
    (state, report) with the config echo filled in."""
    hp = replace(apply_variant(config.hyper, variant), seed=seed)
    dataset = make_dataset(config, seed)
    state, report = train(hp, dataset)
    if variant in REFINED_VARIANTS:
        state, report = dirtt_refine(state, dataset, hp)
    report.config["variant"] = variant
    report.config["seed"] = seed
    report.config["data"] = _data_echo(config)
    return state, report


def run_experiment(config: ExperimentConfig) -> list:
    """Train config.variant for every seed; write one metrics document,
    checkpoint, feature export, and timing sidecar per seed.

    A per-seed abort is recorded in the returned summaries and the remaining
    seeds still run.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    results = []
    for seed in config.seeds:
        stem = os.path.join(config.out_dir,
                            "%s_seed%d" % (config.variant, seed))
        t0 = time.time()
        try:
            state, report = _run_one(config, config.variant, seed)
        except TrainingAbort as err:
            results.append({"seed": seed, "error": str(err)})
            with open(stem + "_error.txt", "w", encoding="utf-8") as f:
                f.write(str(err) + "\n")
            continue
        with open(stem + "_metrics.json", "w", encoding="utf-8") as f:
            f.write(report.to_json())
        with open(stem + "_confusion.txt", "w", encoding="utf-8") as f:
            for row in report.final_confusion:
                f.write(" ".join("%6d" % v for v in row) + "\n")
        save_checkpoint(state, stem + "_model.ckpt")
        dataset = make_dataset(config, seed)
        csv_text = export_features(state, dataset, config.export_n)
        with open(stem + "_features.csv", "w", encoding="utf-8") as f:
            f.write(csv_text)
        with open(stem + "_timing.json", "w", encoding="utf-8") as f:
            json.dump({"variant": config.variant, "seed": seed,
                       "wall_clock_s": time.time() - t0}, f)
            f.write("\n")
        results.append({"seed": seed,
                        "accuracy": report.final_accuracy,
                        "metrics": stem + "_metrics.json"})
    return results


@dataclass
class AblationTable:
    """Per-cell accuracies plus per-variant medians and interquartile ranges."""

    variants: tuple
    seeds: tuple
    cells: dict = field(default_factory=dict)
    states: dict | None = None

    def accuracies(self, variant: str) -> list:
        vals = []
        for seed in self.seeds:
            cell = self.cells[(variant, seed)]
            if "accuracy" in cell:
                vals.append(cell["accuracy"])
        return vals

    def median(self, variant: str) -> float:
        vals = self.accuracies(variant)
        if not vals:
            raise ContractError("variant %s has no successful runs" % variant)
        return float(np.median(sorted(vals)))

    def iqr(self, variant: str):
        vals = sorted(self.accuracies(variant))
        if not vals:
            raise ContractError("variant %s has no successful runs" % variant)
        return (float(np.percentile(vals, 25)),
                float(np.percentile(vals, 75)))

    def to_json(self) -> str:
        doc = {"variants": {}, "seeds": list(self.seeds)}
        for variant in self.variants:
            rows = {}
            for seed in self.seeds:
                rows[str(seed)] = self.cells[(variant, seed)]
            entry = {"cells": rows}
            if self.accuracies(variant):
                entry["median"] = self.median(variant)
                q1, q3 = self.iqr(variant)
                entry["iqr"] = [q1, q3]
            doc["variants"][variant] = entry
        return json.dumps(doc, sort_keys=True, separators=(",", ": ")) + "\n"

    def to_text(self) -> str:
        lines = ["variant        median   iqr            seeds=%d"
                 % len(self.seeds)]
        for variant in self.variants:
            if self.accuracies(variant):
                q1, q3 = self.iqr(variant)
                lines.append("%-14s %.4f   [%.4f,%.4f]"
                             % (variant, self.median(variant), q1, q3))
            else:
                lines.append("%-14s all runs failed" % variant)
            for seed in self.seeds:
                cell = self.cells[(variant, seed)]
                if "error" in cell:
                    lines.append("  seed %d FAILED: %s"
                                 % (seed, cell["error"]))
        return "\n".join(lines) + "\n"


def run_ablation(config: ExperimentConfig, keep_states: bool = False) -> AblationTable:
    """Every (variant, seed) cell of config.ablate_variants.

    The refined variant reuses its base run's final networks instead of
    retraining, refining a copy so the base cell's state survives.  With
    keep_states=True the per-cell final states are kept on the table for
    callers that want to inspect features.
    """
    if len(config.seeds) < 5:
        raise ContractError("ablation needs at least 5 seeds")
    variants = tuple(config.ablate_variants)
    table = AblationTable(variants=variants, seeds=config.seeds,
                          states={} if keep_states else None)
    for seed in config.seeds:
        trained = {}
        for variant in variants:
            try:
                if variant in REFINED_VARIANTS:
                    base = variant[:-len("_dirtt")]
                    if base in trained:
                        state = copy.deepcopy(trained[base])
                    else:
                        hp = replace(apply_variant(config.hyper, variant),
                                     seed=seed)
                        state, _ = train(hp, make_dataset(config, seed))
                    hp = replace(apply_variant(config.hyper, variant),
                                 seed=seed)
                    dataset = make_dataset(config, seed)
                    state, report = dirtt_refine(state, dataset, hp)
                else:
                    state, report = _run_one(config, variant, seed)
                    trained[variant] = state
                table.cells[(variant, seed)] = {
                    "accuracy": report.final_accuracy}
                if keep_states:
                    table.states[(variant, seed)] = state
            except TrainingAbort as err:
                table.cells[(variant, seed)] = {"error": str(err)}
    return table


# -- feature export and inspection --------------------------------------------


def _phi_of(state: TrainState, x: np.ndarray) -> np.ndarray:
    _, _, phi = forward_classifier(state.bundle.classifier,
                                   Tensor(_prep(state.hp, x)), frozen=True)
    return phi.data


def pca_projection(rows: np.ndarray) -> np.ndarray:
    """Top-2 principal projection, deterministic up to sign convention.

    Each component's sign makes its largest-magnitude coordinate positive.
    With fewer than 2 feature columns the projection pads with zeros.
    """
    centered = rows - rows.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    out = np.zeros((rows.shape[0], 2))
    for i in range(min(2, comps.shape[0])):
        c = comps[i]
        j = int(np.argmax(np.abs(c)))
        if c[j] < 0:
            c = -c
        out[:, i] = centered @ c
    return out


def export_features(state: TrainState, dataset: DomainShiftDataset,
                    n_per_split: int) -> str:
    """CSV of raw phi features plus their shared 2-D principal projection.

    Rows come from the source split (true labels), the target test split
    (true labels), and freshly generated samples (label -1).  The projection
    is fitted on the union of all exported rows.
    """
    if n_per_split < 1:
        raise ContractError("n_per_split must be positive")
    hp = state.hp
    n_src = min(n_per_split, dataset.source_x.shape[0])
    n_tst = min(n_per_split, dataset.test_x.shape[0])
    z = site_rng(hp.seed, "export.noise", 0).standard_normal(
        (n_per_split, hp.d_z))
    x_gen = forward_generator(state.bundle.gen, Tensor(z), frozen=True).data
    blocks = [
        ("source", dataset.source_x[:n_src], dataset.source_y[:n_src]),
        ("target_test", dataset.test_x[:n_tst], dataset.test_y[:n_tst]),
        ("generated", x_gen, np.full(n_per_split, -1, dtype=np.int64)),
    ]
    phis = [_phi_of(state, x) for _, x, _ in blocks]
    union = np.concatenate(phis, axis=0)
    proj = pca_projection(union)
    q = union.shape[1]
    header = ["split", "label"] + ["f%d" % (i + 1) for i in range(q)] + \
        ["pc1", "pc2"]
    lines = [",".join(header)]
    row_at = 0
    for (split, _, labels), phi in zip(blocks, phis):
        for i in range(phi.shape[0]):
            p = proj[row_at]
            cells = [split, str(int(labels[i]))]
            cells += [repr(float(v)) for v in phi[i]]
            cells += [repr(float(p[0])), repr(float(p[1]))]
            lines.append(",".join(cells))
            row_at += 1
    return "\n".join(lines) + "\n"


def _parse_feature_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvParseError("feature CSV is empty")
    if len(header) < 5 or header[0] != "split" or header[1] != "label" \
            or header[-2] != "pc1" or header[-1] != "pc2":
        raise CsvParseError(
            "feature CSV header must be split,label,f1..fq,pc1,pc2")
    q = len(header) - 4
    rows = []
    for lineno, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise CsvParseError(
                "line %d: expected %d cells, got %d"
                % (lineno, len(header), len(cells)))
        try:
            label = int(cells[1])
            phi = np.array([float(v) for v in cells[2:2 + q]])
            pc = (float(cells[-2]), float(cells[-1]))
        except ValueError as err:
            raise CsvParseError("line %d: %s" % (lineno, err))
        rows.append({"split": cells[0], "label": label, "phi": phi, "pc": pc})
    return q, rows


def cluster_separation_metric(csv_text: str) -> float:
    """Between-centroid over within-spread ratio of target-test phi clusters.

    Classes with fewer than 2 samples are excluded with a warning; at least
    two classes must survive.
    """
    _, rows = _parse_feature_csv(csv_text)
    groups = {}
    for row in rows:
        if row["split"] == "target_test" and row["label"] >= 1:
            groups.setdefault(row["label"], []).append(row["phi"])
    for label in sorted(groups):
        if len(groups[label]) < 2:
            warnings.warn(
                "class %d has fewer than 2 target samples; excluded" % label)
            del groups[label]
    if len(groups) < 2:
        raise ContractError(
            "need at least 2 labeled target classes with 2+ samples")
    cents = {label: np.mean(groups[label], axis=0) for label in groups}
    keys = sorted(cents)
    between = np.mean([np.linalg.norm(cents[a] - cents[b])
                       for i, a in enumerate(keys) for b in keys[i + 1:]])
    within = np.mean([np.linalg.norm(phi - cents[label])
                      for label in keys for phi in groups[label]])
    return float(between / max(within, 1e-12))


# -- scatter plot -------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _color_of(label: int) -> str:
    if label < 1:
        return "#999999"
    return _PALETTE[(label - 1) % len(_PALETTE)]


def _marker(split: str, x: float, y: float, color: str) -> str:
    if split == "source":
        return ('<circle cx="%.2f" cy="%.2f" r="3" fill="%s" '
                'fill-opacity="0.7"/>' % (x, y, color))
    if split == "target_test":
        return ('<rect x="%.2f" y="%.2f" width="6" height="6" fill="%s" '
                'fill-opacity="0.7"/>' % (x - 3, y - 3, color))
    return ('<polygon points="%.2f,%.2f %.2f,%.2f %.2f,%.2f" fill="%s" '
            'fill-opacity="0.7"/>'
            % (x, y - 4, x - 3.5, y + 3, x + 3.5, y + 3, color))


def emit_scatter_svg(csv_text: str, path) -> None:
    """Projected feature scatter: color by label, marker shape by split."""
    _, rows = _parse_feature_csv(csv_text)
    width, height = 640, 480
    left, right, top, bottom = 50, 490, 20, 440
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
        'viewBox="0 0 %d %d">' % (width, height, width, height),
        '<rect x="0" y="0" width="%d" height="%d" fill="white"/>'
        % (width, height),
        '<rect x="%d" y="%d" width="%d" height="%d" fill="none" '
        'stroke="#333333"/>' % (left, top, right - left, bottom - top),
    ]
    if rows:
        xs = np.array([r["pc"][0] for r in rows])
        ys = np.array([r["pc"][1] for r in rows])
        x_lo, x_hi = float(xs.min()), float(xs.max())
        y_lo, y_hi = float(ys.min()), float(ys.max())
        x_pad = (x_hi - x_lo) * 0.05 or 1.0
        y_pad = (y_hi - y_lo) * 0.05 or 1.0
        x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
        y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

        def sx(v):
            return left + (v - x_lo) / (x_hi - x_lo) * (right - left)

        def sy(v):
            return bottom - (v - y_lo) / (y_hi - y_lo) * (bottom - top)

        for r in rows:
            parts.append(_marker(r["split"], sx(r["pc"][0]), sy(r["pc"][1]),
                                 _color_of(r["label"])))
        parts.append(
            '<text x="%d" y="%d" font-size="11" fill="#333333">'
            'pc1 [%.3g, %.3g]</text>' % (left, bottom + 18, x_lo, x_hi))
        parts.append(
            '<text x="%d" y="%d" font-size="11" fill="#333333" '
            'transform="rotate(-90 %d %d)">pc2 [%.3g, %.3g]</text>'
            % (left - 35, bottom, left - 35, bottom, y_lo, y_hi))
    legend_x = right + 15
    y = top + 10
    parts.append('<text x="%d" y="%d" font-size="12" fill="#111111">'
                 'splits</text>' % (legend_x, y))
    for split in ("source", "target_test", "generated"):
        y += 18
        parts.append(_marker(split, legend_x + 5, y - 4, "#555555"))
        parts.append('<text x="%d" y="%d" font-size="11" fill="#333333">'
                     '%s</text>' % (legend_x + 15, y, split))
    labels = sorted({r["label"] for r in rows})
    y += 26
    parts.append('<text x="%d" y="%d" font-size="12" fill="#111111">'
                 'labels</text>' % (legend_x, y))
    for label in labels:
        y += 18
        parts.append('<circle cx="%d" cy="%d" r="4" fill="%s"/>'
                     % (legend_x + 5, y - 4, _color_of(label)))
        name = "generated" if label < 1 else "class %d" % label
        parts.append('<text x="%d" y="%d" font-size="11" fill="#333333">'
                     '%s</text>' % (legend_x + 15, y, name))
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")


# -- gradient oracle ----------------------------------------------------------


def _oracle_models(trial: int):
    g_spec = NetSpec([2, 8], head="none")
    h_spec = NetSpec([8, 8, 5], head="linear")
    model = ClassifierModel(g_spec, h_spec, K=4, seed=100 + trial)
    disc = DiscriminatorModel(NetSpec([8, 8, 1], head="sigmoid"),
                              seed=200 + trial)
    gen = GeneratorModel(NetSpec([3, 8, 2], head="tanh"), seed=300 + trial)
    return model, disc, gen


def run_gradient_oracle(trials: int = 20, h: float = 1e-5,
                        tol: float = 1e-4, seed: int = 0) -> list:
    """Finite-difference verification of every loss, on small random nets.

    Returns [(loss_name, max_rel_error, passed)] over `trials` random draws
    each; the discriminator loss is checked along both its live paths.
    """
    results = []
    rng = np.random.default_rng(seed)

    def check(name, builder_factory, params_of):
        worst = 0.0
        ok = True
        for trial in range(trials):
            model, disc, gen = _oracle_models(trial)
            builder, params = builder_factory(model, disc, gen, rng)
            report = grad_check(builder, params, h=h, tol=tol)
            worst = max(worst, report.max_rel_error)
            ok = ok and report.passed
        results.append((name, worst, ok))

    def cls_case(model, disc, gen, rng):
        x = Tensor(rng.standard_normal((5, 2)))
        y = rng.integers(1, 5, size=5)
        return (lambda ps: loss_classification(model, x, y)), model.params

    def domain_features_case(model, disc, gen, rng):
        x_s = Tensor(rng.standard_normal((4, 2)))
        x_t = Tensor(rng.standard_normal((4, 2)))

        def builder(ps):
            _, f_s, _ = forward_classifier(model, x_s)
            _, f_t, _ = forward_classifier(model, x_t)
            return loss_domain(disc, f_s, f_t, frozen_disc=True)
        return builder, model.params

    def domain_disc_case(model, disc, gen, rng):
        f_s = Tensor(rng.standard_normal((4, 8)))
        f_t = Tensor(rng.standard_normal((4, 8)))
        return (lambda ps: loss_domain(disc, f_s, f_t)), disc.params

    def unsup_case(model, disc, gen, rng):
        x_t = Tensor(rng.standard_normal((4, 2)))
        x_g = Tensor(rng.standard_normal((4, 2)))
        return (lambda ps: loss_unsupervised(model, x_t, x_g)), model.params

    def entropy_case(model, disc, gen, rng):
        x = Tensor(rng.standard_normal((5, 2)))
        return (lambda ps: loss_entropy(model, x)), model.params

    def vat_case(model, disc, gen, rng):
        x = Tensor(rng.standard_normal((4, 2)))
        cfg = VatConfig(epsilon=0.5)
        r = vat_perturbation(model, x, cfg, np.random.default_rng(7))
        ref_p = class_distribution(model, x, frozen=True).data
        return (lambda ps: loss_vat(model, x, cfg, np.random.default_rng(7),
                                    perturbation=r, reference=ref_p)), \
            model.params

    def fm_case(model, disc, gen, rng):
        x_t = Tensor(rng.standard_normal((4, 2)))
        z = Tensor(rng.standard_normal((4, 3)))
        return (lambda ps: loss_feature_matching(model, gen, x_t, z)), \
            gen.params

    check("classification", cls_case, None)
    check("domain(features)", domain_features_case, None)
    check("domain(disc)", domain_disc_case, None)
    check("unsupervised", unsup_case, None)
    check("entropy", entropy_case, None)
    check("vat", vat_case, None)
    check("feature_matching", fm_case, None)
    return results


# -- command line -------------------------------------------------------------


def _cmd_gen_data(config: ExperimentConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    dataset = make_dataset(config, config.data.seed
                           if config.data is not None else 0)
    save_csv(os.path.join(out_dir, "source_x.csv"), dataset.source_x)
    save_csv(os.path.join(out_dir, "source_y.csv"),
             dataset.source_y.reshape(-1, 1))
    save_csv(os.path.join(out_dir, "target_x.csv"), dataset.target_x)
    save_csv(os.path.join(out_dir, "test_x.csv"), dataset.test_x)
    save_csv(os.path.join(out_dir, "test_y.csv"),
             dataset.test_y.reshape(-1, 1))
    print("wrote 5 CSVs to %s (%s)" % (out_dir, dataset.provenance))
    return 0


def _cmd_train(config: ExperimentConfig) -> int:
    results = run_experiment(config)
    for entry in results:
        if "error" in entry:
            print("seed %d FAILED: %s" % (entry["seed"], entry["error"]),
                  file=sys.stderr)
        else:
            print("seed %d: target accuracy %.4f -> %s"
                  % (entry["seed"], entry["accuracy"], entry["metrics"]))
    if all("error" in e for e in results):
        return 2
    return 0


def _cmd_refine(config: ExperimentConfig, ckpt_path: str) -> int:
    state = load_checkpoint(ckpt_path)
    dataset = make_dataset(config, state.hp.seed)
    state, report = dirtt_refine(state, dataset, config.hyper)
    os.makedirs(config.out_dir, exist_ok=True)
    stem = os.path.join(config.out_dir, "refined_seed%d" % state.hp.seed)
    report.config["variant"] = "refined"
    report.config["seed"] = state.hp.seed
    report.config["data"] = _data_echo(config)
    with open(stem + "_metrics.json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    save_checkpoint(state, stem + "_model.ckpt")
    print("refined: target accuracy %.4f -> %s"
          % (report.final_accuracy, stem + "_metrics.json"))
    return 0


def _cmd_eval(config: ExperimentConfig, ckpt_path: str) -> int:
    state = load_checkpoint(ckpt_path)
    dataset = make_dataset(config, state.hp.seed)
    accuracy, confusion = evaluate(state, dataset.test_x, dataset.test_y)
    print(json.dumps({"target_accuracy": accuracy,
                      "confusion": confusion.tolist()}, sort_keys=True))
    return 0


def _cmd_ablate(config: ExperimentConfig) -> int:
    table = run_ablation(config)
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "ablation.json"), "w",
              encoding="utf-8") as f:
        f.write(table.to_json())
    text = table.to_text()
    with open(os.path.join(config.out_dir, "ablation.txt"), "w",
              encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    return 0


def _cmd_grad_check() -> int:
    results = run_gradient_oracle()
    all_ok = True
    print("loss                max rel err   status")
    for name, err, ok in results:
        all_ok = all_ok and ok
        print("%-18s  %.3e     %s" % (name, err, "pass" if ok else "FAIL"))
    return 0 if all_ok else 2


def _cmd_export_features(config: ExperimentConfig, ckpt_path: str,
                         out_path: str) -> int:
    state = load_checkpoint(ckpt_path)
    dataset = make_dataset(config, state.hp.seed)
    text = export_features(state, dataset, config.export_n)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(text)
    print("wrote %s" % out_path)
    return 0


def _cmd_plot(features_path: str, out_path: str) -> int:
    try:
        with open(features_path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as err:
        print("cannot read %s: %s" % (features_path, err), file=sys.stderr)
        return 1
    emit_scatter_svg(text, out_path)
    print("wrote %s" % out_path)
    return 0


def _build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        prog="gada",
        description="domain adaptation benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="key = value file")
        return p

    p = with_config(sub.add_parser("gen-data", help="write dataset CSVs"))
    p.add_argument("--out", default=None, help="output directory")
    with_config(sub.add_parser("train", help="train run.variant per seed"))
    p = with_config(sub.add_parser("refine", help="refine a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    with_config(sub.add_parser("ablate", help="run the variant table"))
    sub.add_parser("grad-check", help="finite-difference loss verification")
    p = with_config(sub.add_parser("export-features",
                                   help="feature CSV from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("plot", help="SVG scatter from a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    return parser


def cli_main(argv=None) -> int:
    """Dispatch; 0 success, 1 usage/config problems, 2 runtime aborts."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1
    try:
        if args.command == "grad-check":
            return _cmd_grad_check()
        if args.command == "plot":
            return _cmd_plot(args.features, args.out)
        config = load_config(args.config)
        if args.command == "gen-data":
            return _cmd_gen_data(config, args.out or config.out_dir)
        if args.command == "train":
            return _cmd_train(config)
        if args.command == "refine":
            return _cmd_refine(config, args.checkpoint)
        if args.command == "eval":
            return _cmd_eval(config, args.checkpoint)
        if args.command == "ablate":
            return _cmd_ablate(config)
        if args.command == "export-features":
            return _cmd_export_features(config, args.checkpoint, args.out)
        parser.error("unknown command %r" % args.command)
    except TrainingAbort as err:
        print("training aborted: %s" % err, file=sys.stderr)
        return 2
    except ContractError as err:
        print("error: %s" % err, file=sys.stderr)
        return 1
    except OSError as err:
        print("file error: %s" % err, file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
