"""Named experiments over a JSON config, with fully seeded determinism.

Every experiment reads one validated config, derives all of its randomness
from the config seed through named substreams, and writes a canonical
`report.json` plus CSV side files into its output directory. Reruns with
the same config and seed are byte-identical; that property is part of the
contract and is tested end to end.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import decomposition as dec
from . import generation as gen
from . import twostream as ts
from .cooccurrence import (
    normalize,
    unmasked_count,
    write_joint_csv,
    write_matrix_csv,
)
from .errors import ConfigError, DomainError
from .objectives import ObjectiveSpec, exact_joint, parse_objective
from .spectral import (
    connectivity_estimate,
    exact_ar_spectrum,
    predicted_masked_spectrum,
    singular_spectrum,
    tail_energy,
)
from .toy_model import ToyParams, enumerate_sequences, token_label

_TOP_KEYS = {
    "experiment", "seed", "params", "objectives", "rank", "reg", "trials",
    "lr", "steps", "train", "rho_m", "seeds", "assignment",
}
_TRAIN_KEYS = {"dim", "lr", "steps", "init_noise", "clip"}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: ToyParams
    seed: int = 0
    objectives: tuple[str, ...] = ("ar",)
    rank: int | None = None
    reg: float = 1e-8
    trials: int = 100
    lr: float | None = None
    steps: int | None = None
    train: gen.TrainSettings = field(default_factory=gen.TrainSettings)
    rho_m: tuple[float, ...] | None = None
    seeds: int = 3
    assignment: str | None = None


def load_config(source) -> ExperimentConfig:
    """Validate a config from a dict, a JSON string, or a file path."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(exc), field="config") from exc
    elif isinstance(source, str):
        try:
            raw = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"not an existing file and not valid JSON: {str(source)[:80]!r}",
                field="config",
            ) from exc
    else:
        raw = source
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", field="config")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(
            f"unknown fields {sorted(unknown)}", field="config"
        )
    if "experiment" not in raw:
        raise ConfigError("missing required field", field="experiment")
    name = raw["experiment"]
    if name not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {name!r}; known: {sorted(EXPERIMENTS)}",
            field="experiment",
        )
    if "params" not in raw:
        raise ConfigError("missing required field", field="params")
    pdict = raw["params"]
    if not isinstance(pdict, dict) or set(pdict) != {"r", "s", "T"}:
        raise ConfigError(
            'must be an object with exactly the keys {"r", "s", "T"}',
            field="params",
        )
    try:
        params = ToyParams.from_dict(pdict)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="params") from exc

    objectives = raw.get("objectives", ["ar"])
    if not isinstance(objectives, list) or not objectives:
        raise ConfigError("must be a nonempty list", field="objectives")
    for i, text in enumerate(objectives):
        try:
            spec = parse_objective(text)
        except DomainError as exc:
            raise ConfigError(str(exc), field=f"objectives[{i}]") from exc
        if spec.kind == "masked":
            try:
                unmasked_count(params, spec.rho)
            except DomainError as exc:
                raise ConfigError(str(exc), field=f"objectives[{i}]") from exc

    rho_m = raw.get("rho_m")
    if rho_m is not None:
        if isinstance(rho_m, (int, float)):
            rho_m = [rho_m]
        if not isinstance(rho_m, list) or not rho_m:
            raise ConfigError("must be a ratio or list of ratios", field="rho_m")
        for rho in rho_m:
            try:
                unmasked_count(params, float(rho))
            except DomainError as exc:
                raise ConfigError(str(exc), field="rho_m") from exc
        rho_m = tuple(float(r) for r in rho_m)

    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("must be an object", field="train")
    unknown = set(train_raw) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown fields {sorted(unknown)}", field="train")
    train = gen.TrainSettings(**train_raw)

    def _opt(key, kind, default=None):
        v = raw.get(key, default)
        if v is None:
            return None
        try:
            return kind(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"expected {kind.__name__}", field=key) from exc

    return ExperimentConfig(
        experiment=name,
        params=params,
        seed=int(raw.get("seed", 0)),
        objectives=tuple(objectives),
        rank=_opt("rank", int),
        reg=float(raw.get("reg", 1e-8)),
        trials=int(raw.get("trials", 100)),
        lr=_opt("lr", float),
        steps=_opt("steps", int),
        train=train,
        rho_m=rho_m,
        seeds=int(raw.get("seeds", 3)),
        assignment=raw.get("assignment"),
    )


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent generator for (seed, substream labels), order-sensitive."""
    digest = hashlib.sha256(
        "|".join([str(seed), *labels]).encode()
    ).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _safe(label: str) -> str:
    return label.replace(":", "_").replace("-", "_").replace(".", "p")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_report(report: dict, out_dir) -> str:
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        fh.write(json.dumps(to_jsonable(report), sort_keys=True, indent=2))
        fh.write("\n")
    return path


def _closed_form_spectrum(spec: ObjectiveSpec, params: ToyParams):
    if spec.kind == "ar":
        return exact_ar_spectrum(params)
    if spec.kind == "masked" and params.s * spec.rho > 1 + 1e-9:
        return predicted_masked_spectrum(params, spec.rho)
    return None


def run_spectrum(cfg: ExperimentConfig, out_dir) -> dict:
    """Build each objective's joint, decompose it, compare to closed forms."""
    results = {}
    spectra = {}
    connectivity = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        joint = exact_joint(spec, cfg.params)
        m = normalize(joint)
        numeric = singular_spectrum(m)
        closed = _closed_form_spectrum(spec, cfg.params)
        max_err = None
        if closed is not None:
            n = max(len(numeric), len(closed))
            max_err = float(
                np.max(np.abs(numeric.padded(n) - closed.padded(n)))
            )
        t_tail = cfg.rank if cfg.rank is not None else cfg.params.r
        t_conn = cfg.rank if cfg.rank is not None else cfg.params.r + 1
        t_conn = min(t_conn, min(m.shape))
        feats, _ = dec.probe_features_for_joint(
            joint, t_conn, lambda tok: token_label(cfg.params, tok), m=m
        )
        connectivity[label] = connectivity_estimate([f for f, _, _ in feats])
        write_joint_csv(joint, os.path.join(out_dir, f"joint_{_safe(label)}.csv"))
        write_matrix_csv(m, os.path.join(out_dir, f"normalized_{_safe(label)}.csv"))
        spectra[label] = numeric.values
        results[label] = {
            "rows": m.shape[0],
            "cols": m.shape[1],
            "max_abs_error_vs_closed_form": max_err,
            "tail_energy": {"t": t_tail, "value": tail_energy(numeric, t_tail)},
            "top_singular_values": numeric.values[:10],
        }
    return {
        "experiment": "spectrum",
        "params": cfg.params.to_dict(),
        "results": results,
        "spectra": spectra,
        "connectivity": connectivity,
    }


def run_identity(cfg: ExperimentConfig, out_dir) -> dict:
    """Randomized trials of the loss/factorization identity per objective."""
    results = {}
    dims = (1, 2, 4)
    for label in cfg.objectives:
        spec = parse_objective(label)
        joint = exact_joint(spec, cfg.params)
        worst = 0.0
        for trial in range(cfg.trials):
            rng = derive_rng(cfg.seed, "identity", label, str(trial))
            t = dims[trial % len(dims)]
            enc = dec.EncoderTable.from_map(
                {row: rng.standard_normal(t) for row in joint.rows}
            )
            emb = dec.TokenEmbedding(
                matrix=rng.standard_normal((t, len(joint.cols))),
                tokens=joint.cols,
            )
            worst = max(worst, dec.identity_residual(enc, emb, joint))
        results[label] = {"trials": cfg.trials, "max_residual": worst}
    return {
        "experiment": "identity",
        "params": cfg.params.to_dict(),
        "results": results,
    }


def run_factorize(cfg: ExperimentConfig, out_dir) -> dict:
    """Gradient-descent factorization against the truncated-SVD optimum."""
    results = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        m = normalize(exact_joint(spec, cfg.params))
        t = cfg.rank if cfg.rank is not None else cfg.params.r
        t = min(t, min(m.shape))
        best = dec.optimal_features(m, t)
        optimal = dec.decomposition_objective(best, m)
        run = dec.gd_factorize(
            m,
            t,
            lr=cfg.lr if cfg.lr is not None else 0.05,
            steps=cfg.steps if cfg.steps is not None else 5000,
            rng=derive_rng(cfg.seed, "factorize", label),
        )
        dec.save_factor_pair(best, out_dir, name=f"factors_{_safe(label)}")
        results[label] = {
            "rank": t,
            "optimal_objective": optimal,
            "gd_objective": run.objective,
            "iterations": run.iterations,
            "converged": run.converged,
        }
    return {
        "experiment": "factorize",
        "params": cfg.params.to_dict(),
        "results": results,
    }


def run_probe(cfg: ExperimentConfig, out_dir) -> dict:
    """Linear probe error on each objective's optimal features."""
    results = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        joint = exact_joint(spec, cfg.params)
        t = cfg.rank if cfg.rank is not None else cfg.params.r
        feats, _ = dec.probe_features_for_joint(
            joint, t, lambda tok: token_label(cfg.params, tok)
        )
        probe = dec.linear_probe(feats, reg=cfg.reg)
        entry = {"t": t, "reg": cfg.reg, "error": probe.error}
        with open(
            os.path.join(out_dir, f"probe_{_safe(label)}.json"), "w"
        ) as fh:
            fh.write(json.dumps(to_jsonable(entry), sort_keys=True, indent=2))
            fh.write("\n")
        results[label] = entry
    return {
        "experiment": "probe",
        "params": cfg.params.to_dict(),
        "results": results,
    }


def _bound_rhos(cfg: ExperimentConfig, spec: ObjectiveSpec):
    """Mask ratios at which to evaluate the generation bound for one model."""
    candidates = (
        list(cfg.rho_m)
        if cfg.rho_m
        else [m / cfg.params.s for m in range(1, cfg.params.s)]
    )
    out = []
    for rho in candidates:
        try:
            u = unmasked_count(cfg.params, rho)
        except DomainError:
            continue
        if u < 2:
            continue
        if spec.kind == "masked" and abs(rho - spec.rho) > 1e-9:
            continue
        if spec.kind == "vlm" and not (
            spec.rho_lo - 1e-9 <= rho <= spec.rho_hi + 1e-9
        ):
            continue
        out.append(rho)
    return out


def run_genbound(cfg: ExperimentConfig, out_dir) -> dict:
    """Train one model per objective; measure losses, bound terms, and gaps."""
    params = cfg.params
    dataset = list(enumerate_sequences(params))
    models = {}
    reports = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        rng = derive_rng(cfg.seed, "genbound", label)
        result = gen.train_model(spec, params, cfg.train, rng)
        models[label] = result.model
        g = gen.gen_loss(result.model, dataset, params)
        reports[label] = {
            "gen_loss": g.total,
            "nll": g.nll,
            "perplexity": g.perplexity,
            "per_position": g.per_position,
            "final_train_loss": result.losses[-1],
        }
    delta_ar = None
    if "ar" in models:
        delta_ar = gen.delta_term(
            models["ar"], exact_joint(parse_objective("ar"), params)
        )
    bounds = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        if spec.kind not in ("masked", "vlm"):
            continue
        per_rho = {}
        for rho in _bound_rhos(cfg, spec):
            terms = gen.generation_bound_terms(models[label], params, rho)
            bound = gen.masked_generation_bound(terms)
            per_rho[f"{rho:g}"] = {
                "weights": terms.weights,
                "eta": terms.eta,
                "delta": terms.delta,
                "output_norm": terms.output_norm,
                "bound": bound,
                "gap_vs_ar": None if delta_ar is None else bound - delta_ar,
            }
        bounds[label] = per_rho
    return {
        "experiment": "genbound",
        "params": params.to_dict(),
        "models": reports,
        "bounds": bounds,
        "delta_ar": delta_ar,
    }


def run_masks(cfg: ExperimentConfig, out_dir) -> dict:
    """Dump the two causal masks and measure query-stream leakage."""
    params = cfg.params
    text = cfg.assignment if cfg.assignment is not None else "g1=1,t=2"
    try:
        a = ts.parse_assignment(text, params.s)
    except DomainError as exc:
        raise ConfigError(str(exc), field="assignment") from exc
    masks = ts.build_masks(a)
    ts.write_mask_csv(masks.content, os.path.join(out_dir, "content_mask.csv"))
    ts.write_mask_csv(masks.query, os.path.join(out_dir, "query_mask.csv"))
    model = ts.init_two_stream(params, dim=8, rng=derive_rng(cfg.seed, "masks"))
    rng = derive_rng(cfg.seed, "masks", "perturb")
    drift = max_query_drift(model, a, params, rng, trials=cfg.trials)
    return {
        "experiment": "masks",
        "params": params.to_dict(),
        "assignment": list(a.groups),
        "max_query_drift": drift,
        "mask_files": ["content_mask.csv", "query_mask.csv"],
    }


def max_query_drift(
    model: ts.TwoStreamModel,
    a: ts.GroupAssignment,
    params: ToyParams,
    rng: np.random.Generator,
    trials: int = 8,
) -> float:
    """Worst change in a query row when same-or-later-group tokens change.

    For each predicted group, every token in that group or after it is
    outside the group's allowed keys, so redrawing all of them must leave
    that group's query outputs untouched. Returns the max abs drift seen.
    """
    from .toy_model import sample_sequence

    worst = 0.0
    for _ in range(max(1, trials)):
        label = int(rng.integers(1, params.r + 1))
        x = sample_sequence(params, label, rng)
        _, g_ref = ts.two_stream_forward(model, x.tokens, a)
        for g in range(2, a.num_groups + 1):
            start = a.positions_of(g)[0]
            other = sample_sequence(params, label, rng)
            tokens = list(x.tokens[: start - 1]) + list(other.tokens[start - 1:])
            _, g_new = ts.two_stream_forward(model, tokens, a)
            rows = [p - 1 for p in a.positions_of(g)]
            worst = max(
                worst, float(np.max(np.abs(g_new[rows] - g_ref[rows])))
            )
    return worst


def run_sweep(cfg: ExperimentConfig, out_dir) -> dict:
    """Grid of trained models: one CSV row per model and evaluation ratio.

    The bound column always holds the model's own theoretical bound: the
    masked expression at the row's ratio for masked and variable-ratio
    models, and the worst pretraining error itself for the next-token
    model (whose bound has no length term; its rho is reported as 0).
    """
    import csv

    params = cfg.params
    dataset = list(enumerate_sequences(params))
    rows = []
    delta_ar_by_seed: dict[int, float] = {}
    for label in cfg.objectives:
        spec = parse_objective(label)
        for seed_i in range(cfg.seeds):
            rng = derive_rng(cfg.seed, "sweep", label, str(seed_i))
            model = gen.train_model(spec, params, cfg.train, rng).model
            total = gen.gen_loss(model, dataset, params).total
            if spec.kind in ("ar", "dar"):
                joint = exact_joint(spec, params)
                delta = gen.delta_term(model, joint)
                if spec.kind == "ar":
                    delta_ar_by_seed[seed_i] = delta
                rows.append({
                    "spec": label,
                    "rho": 0.0,
                    "seed": seed_i,
                    "gen_loss": total,
                    "bound": delta,
                    "delta": delta,
                    "eta": gen.max_output_discrepancy(model),
                    "normW2": model.output_norm(),
                })
                continue
            for rho in _bound_rhos(cfg, spec):
                terms = gen.generation_bound_terms(model, params, rho)
                bound = gen.masked_generation_bound(terms)
                rows.append({
                    "spec": label,
                    "rho": rho,
                    "seed": seed_i,
                    "gen_loss": total,
                    "bound": bound,
                    "delta": terms.delta,
                    "eta": terms.eta,
                    "normW2": terms.output_norm,
                })
    gaps: dict[str, dict[str, float]] = {}
    for row in rows:
        seed_i = row["seed"]
        if row["rho"] and seed_i in delta_ar_by_seed:
            key = f"{row['rho']:g}"
            gaps.setdefault(key, {})[f"{row['spec']}|{seed_i}"] = (
                row["bound"] - delta_ar_by_seed[seed_i]
            )
    header = ["spec", "rho", "seed", "gen_loss", "bound", "delta", "eta",
              "normW2"]
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                row["spec"], repr(float(row["rho"])), row["seed"],
                repr(float(row["gen_loss"])), repr(float(row["bound"])),
                repr(float(row["delta"])), repr(float(row["eta"])),
                repr(float(row["normW2"])),
            ])
    return {
        "experiment": "sweep",
        "params": params.to_dict(),
        "rows": rows,
        "gaps": gaps,
    }


EXPERIMENTS = {
    "spectrum": run_spectrum,
    "identity": run_identity,
    "factorize": run_factorize,
    "probe": run_probe,
    "genbound": run_genbound,
    "masks": run_masks,
    "sweep": run_sweep,
}


def emit_plot_data(report: dict, out_dir) -> tuple[list[str], list[str]]:
    """Write plot-ready CSVs for whatever sections the report carries.

    Returns (written, skipped) file name lists; a section that is present
    but empty still gets its header-only file.
    """
    import csv

    written, skipped = [], []

    if "spectra" in report:
        path = os.path.join(out_dir, "spectrum.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["objective", "rank", "sigma"])
            for label in sorted(report["spectra"]):
                for i, v in enumerate(report["spectra"][label], start=1):
                    writer.writerow([label, i, repr(float(v))])
        written.append("spectrum.csv")
    else:
        skipped.append("spectrum.csv")

    if "models" in report:
        path = os.path.join(out_dir, "perk.csv")
        entries = []
        for label in sorted(report["models"]):
            per_k = report["models"][label].get("per_position", {})
            for k, v in per_k.items():
                entries.append((int(k), label, float(v)))
        entries.sort()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "k", "loss"])
            for k, label, v in entries:
                writer.writerow([label, k, repr(v)])
        written.append("perk.csv")
    else:
        skipped.append("perk.csv")

    if "connectivity" in report:
        path = os.path.join(out_dir, "connectivity.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["objective", "estimate"])
            for label in sorted(report["connectivity"]):
                writer.writerow(
                    [label, repr(float(report["connectivity"][label]))]
                )
        written.append("connectivity.csv")
    else:
        skipped.append("connectivity.csv")

    return written, skipped


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Execute one experiment and write its report and plot data."""
    os.makedirs(out_dir, exist_ok=True)
    report = EXPERIMENTS[cfg.experiment](cfg, out_dir)
    write_report(report, out_dir)
    emit_plot_data(report, out_dir)
    return report
