"""Command-line front end.

Every command is deterministic for a fixed ``--seed``: reports use sorted-key
JSON without timestamps and are written atomically. Configuration errors
exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .bundle_io import atomic_write, dumps, load_bundle, load_tensor, save_bundle
from .dvfs import EnergyModel, LdoAdpllModel, VfTable
from .earlyexit import (
    TrainParams,
    distill_lut,
    exit_layers,
    lut_to_json,
    predict_exit_layer,
    train_predictor,
)
from .envm import PRESETS, CellConfig, MemoryCosts, envm_geometry, power_on_cost, run_trials
from .model import TABLE_SPANS, AttentionSpans, EncoderBundle, EncoderConfig, flops_count, random_bundle, random_sentences
from .simulator import Accelerator, PolicyConfig, oracle_predictor, run_base, run_stream
from .sparse import BitmaskTensor, storage_footprint

REPORT_SCHEMA = 1
CSV_COLUMNS = (
    "sentence_id", "policy", "n", "T_ms", "E_T", "exit_layer",
    "predicted_layer", "latency_ms", "energy", "deadline_met",
)


class ConfigError(Exception):
    pass


def _read_json(path) -> object:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _csv_text(rows: list, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()


# ------------------------------------------------------------------ scenario

SCENARIO_DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "bundle": None,
    "model": {"preset": "toy", "overrides": {"num_layers": 12}, "spans": None},
    "policies": [
        {"policy": "base"},
        {"policy": "ee", "entropy_threshold": 0.4},
        {"policy": "lai", "entropy_threshold": 0.4},
    ],
    "predictor": {"kind": "train", "train_sentences": 200, "epochs": 100, "bins": 256},
    "sweep": {"tile_n": [16], "latency_target_ms": [50.0], "entropy_threshold": None},
    "stream": {"sentences": 20, "pool": None},
    "vf_table": None,
    "energy_model": None,
    "ldo": None,
    "envm": None,
}


def _merge(defaults: dict, given: dict) -> dict:
    out = dict(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown scenario key {k!r}")
        out[k] = {**defaults[k], **v} if isinstance(defaults[k], dict) and isinstance(v, dict) else v
    return out


def _config_from(model: dict) -> EncoderConfig:
    presets = {"toy": EncoderConfig.toy, "albert": EncoderConfig.albert_base}
    if model.get("preset") not in presets:
        raise ConfigError(f"unknown model preset {model.get('preset')!r}")
    try:
        return presets[model["preset"]](**(model.get("overrides") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def resolve_scenario(path, seed: int | None) -> tuple[dict, EncoderBundle, Path]:
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a JSON object")
    base = Path(path).resolve().parent
    sc = _merge(SCENARIO_DEFAULTS, raw)
    sc["seed"] = int(seed) if seed is not None else int(sc["seed"])
    for axis in ("tile_n", "latency_target_ms"):
        if not sc["sweep"].get(axis):
            raise ConfigError(f"sweep axis {axis} must be nonempty")
    if sc.get("bundle"):
        bpath = (base / sc["bundle"]).resolve()
        try:
            bundle = load_bundle(bpath)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load bundle: {exc}") from exc
        sc["bundle"] = str(sc["bundle"])
    else:
        cfg = _config_from(sc["model"])
        bundle = random_bundle(cfg, sc["seed"], spans=sc["model"].get("spans"))
    return sc, bundle, base


def _load_cfg(base: Path, rel, cls, default):
    if rel is None:
        return default, default.to_dict()
    try:
        obj = cls.from_dict(_read_json(base / rel))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{rel}: {exc}") from exc
    return obj, obj.to_dict()


def _entropy_traces(accel: Accelerator, sentences) -> np.ndarray:
    return np.array([run_base(s, accel).entropies for s in sentences])


def _build_predictor(spec: dict, accel: Accelerator, threshold: float, seed: int, base: Path):
    kind = spec.get("kind", "train")
    cfg = accel.bundle.config
    if kind == "oracle":
        return oracle_predictor(accel, threshold)
    if kind == "lut":
        from .earlyexit import lut_from_json

        text = (base / spec["path"]).read_text()
        return lut_from_json(text, num_layers=cfg.num_layers, num_classes=cfg.num_classes, threshold=threshold)
    if kind == "train":
        train = random_sentences(cfg, int(spec.get("train_sentences", 200)), seed=seed + 2)
        traces = _entropy_traces(accel, train)
        params = TrainParams(epochs=int(spec.get("epochs", 100)), seed=seed)
        p = train_predictor(traces, threshold, params, num_classes=cfg.num_classes)
        return distill_lut(p, int(spec.get("bins", 256)))
    raise ConfigError(f"unknown predictor kind {kind!r}")


def _stream(cfg: EncoderConfig, stream: dict, seed: int) -> list:
    count = int(stream.get("sentences", 20))
    if count < 1:
        raise ConfigError("stream needs at least one sentence")
    pool = stream.get("pool")
    if not pool:
        return random_sentences(cfg, count, seed=seed + 1)
    unique = random_sentences(cfg, int(pool), seed=seed + 1)
    picks = np.random.default_rng(seed + 3).integers(0, len(unique), size=count)
    return [unique[i] for i in picks]


def _point_name(policy: str, n: int, t_ms: float, e_t: float) -> str:
    return f"{policy}_n{n}_T{t_ms:g}ms_ET{e_t:g}"


def run_scenario(path, seed: int | None = None) -> dict:
    sc, bundle, base = resolve_scenario(path, seed)
    seed = sc["seed"]
    vf, vf_d = _load_cfg(base, sc["vf_table"], VfTable, VfTable.default())
    em, em_d = _load_cfg(base, sc["energy_model"], EnergyModel, EnergyModel())
    ldo, ldo_d = _load_cfg(base, sc["ldo"], LdoAdpllModel, LdoAdpllModel())
    sentences = _stream(bundle.config, sc["stream"], seed)

    points, rows = [], []
    for n in sc["sweep"]["tile_n"]:
        accel = Accelerator(bundle, vf, ldo, em, tile_n=int(n))
        predictors = {}
        for pol in sc["policies"]:
            thresholds = sc["sweep"].get("entropy_threshold") or [pol.get("entropy_threshold", 0.0)]
            for e_t in thresholds:
                for t_ms in sc["sweep"]["latency_target_ms"]:
                    try:
                        cfg = PolicyConfig(pol["policy"], float(e_t), float(t_ms) * 1e-3, int(n))
                    except (KeyError, ValueError) as exc:
                        raise ConfigError(f"bad policy entry {pol}: {exc}") from exc
                    predictor = None
                    if cfg.policy == "lai":
                        if e_t not in predictors:
                            predictors[e_t] = _build_predictor(sc["predictor"], accel, float(e_t), seed, base)
                        predictor = predictors[e_t]
                    rep = run_stream(sentences, accel, cfg, predictor)
                    name = _point_name(cfg.policy, cfg.tile_n, float(t_ms), float(e_t))
                    summary = {"point": name, "n": cfg.tile_n, "T_ms": float(t_ms), "E_T": float(e_t), **rep.summary()}
                    points.append(summary)
                    for i, r in enumerate(rep.results):
                        rows.append(
                            {
                                "point": name,
                                "sentence_id": i,
                                "policy": cfg.policy,
                                "n": cfg.tile_n,
                                "T_ms": float(t_ms),
                                "E_T": float(e_t),
                                "exit_layer": r.exit_layer,
                                "predicted_layer": "" if r.predicted_layer is None else r.predicted_layer,
                                "latency_ms": r.latency * 1e3,
                                "energy": r.energy,
                                "deadline_met": r.deadline_met,
                            }
                        )
    resolved = dict(sc)
    resolved.update(
        {"vf_table": vf_d, "energy_model": em_d, "ldo": ldo_d, "encoder": asdict(bundle.config), "spans": list(bundle.spans)}
    )
    report = {"schema_version": REPORT_SCHEMA, "calibrated": True, "config": resolved, "points": points, "rows": rows}
    if sc.get("envm"):
        report["envm"] = _envm_report(bundle.embedding, bundle, sc["envm"], seed)
    return report


def _write_run(report: dict, out: str, fmt: str) -> None:
    d = Path(out)
    if fmt == "csv":
        atomic_write(d / "sentences.csv", _csv_text(report["rows"], CSV_COLUMNS))
        cols = sorted(report["points"][0]) if report["points"] else []
        atomic_write(d / "summary.csv", _csv_text(report["points"], cols))
        return
    by_point: dict = {}
    for r in report["rows"]:
        by_point.setdefault(r["point"], []).append(r)
    for p in report["points"]:
        body = {"schema_version": REPORT_SCHEMA, "calibrated": True, "config": report["config"], "summary": p,
                "sentences": by_point.get(p["point"], [])}
        atomic_write(d / f"{p['point']}.json", dumps(body))
    summary = {k: v for k, v in report.items() if k != "rows"}
    atomic_write(d / "summary.json", dumps(summary))


# --------------------------------------------------------------------- envm


def _cell(spec) -> CellConfig:
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ConfigError(f"unknown cell preset {spec!r}")
        return PRESETS[spec]
    if isinstance(spec, dict):
        base = PRESETS.get(spec.get("preset", ""), None)
        fields = {k: v for k, v in spec.items() if k != "preset"}
        try:
            return CellConfig(**{**(asdict(base) if base else {}), **fields})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad cell config: {exc}") from exc
    raise ConfigError("cell config must be a preset name or an object")


def agreement_closure(bundle: EncoderBundle, sentences: list):
    """Fraction of sentences whose final prediction matches the fault-free model.

    Only sentences touching a changed embedding row are re-run.
    """
    from .model import encoder_forward
    from .sparse import decode_bitmask

    def predict(b: EncoderBundle, tokens) -> int:
        return int(np.argmax(encoder_forward(tokens, b).logits[-1]))

    clean = [predict(bundle, s) for s in sentences]
    clean_table = decode_bitmask(bundle.embedding).codes

    def evaluate(emb: BitmaskTensor) -> float:
        table = decode_bitmask(emb).codes
        changed = set(np.nonzero(np.any(table != clean_table, axis=1))[0].tolist())
        if not changed:
            return 1.0
        faulty = replace(bundle, embedding=emb)
        hits = 0
        for s, ref in zip(sentences, clean):
            touched = bool(changed.intersection(s)) or (0 in changed and len(s) < bundle.config.seq_len)
            hits += (predict(faulty, s) == ref) if touched else 1
        return hits / len(sentences)

    return evaluate


def weight_fidelity_closure(source: BitmaskTensor):
    """Fraction of tensor elements read back unchanged."""
    from .sparse import decode_bitmask

    ref = decode_bitmask(source).codes

    def evaluate(emb: BitmaskTensor) -> float:
        return float(np.mean(decode_bitmask(emb).codes == ref))

    return evaluate


ENVM_DEFAULTS = {"data_cell": "MLC2", "mask_cell": "SLC", "trials": 100, "eval_sentences": 100}


def _envm_report(tensor: BitmaskTensor, bundle: EncoderBundle | None, spec: dict, seed: int) -> dict:
    spec = {**ENVM_DEFAULTS, **spec}
    data_cfg, mask_cfg = _cell(spec["data_cell"]), _cell(spec["mask_cell"])
    if bundle is not None:
        sentences = random_sentences(bundle.config, int(spec["eval_sentences"]), seed=seed + 4)
        closure, metric = agreement_closure(bundle, sentences), "prediction_agreement"
    else:
        closure, metric = weight_fidelity_closure(tensor), "weight_fidelity"
    stats = run_trials(tensor, data_cfg, mask_cfg, closure, int(spec["trials"]), seed)
    mb = storage_footprint(tensor)["total"] / 1e6
    return {
        "calibrated": True,
        "metric": metric,
        "config": {**spec, "data_cell": data_cfg.to_dict(), "mask_cell": mask_cfg.to_dict(), "seed": seed},
        "stats": stats.to_dict(),
        "geometry": {"data": envm_geometry(data_cfg, mb), "mask": envm_geometry(mask_cfg, mb)},
    }


def _load_tensor_or_bundle(path) -> tuple[BitmaskTensor, EncoderBundle | None]:
    p = Path(path)
    try:
        if p.is_dir():
            b = load_bundle(p)
            return b.embedding, b
        if p.is_file():
            return load_tensor(p), None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load {p}: {exc}") from exc
    raise ConfigError(f"not found: {p}")


# ----------------------------------------------------------------- commands


def cmd_run(args) -> int:
    report = run_scenario(args.scenario, args.seed)
    if args.out:
        _write_run(report, args.out, args.format)
    elif args.format == "csv":
        sys.stdout.write(_csv_text(report["rows"], CSV_COLUMNS))
    else:
        sys.stdout.write(dumps({k: v for k, v in report.items() if k != "rows"}))
    return 0


def _read_traces(path) -> tuple[np.ndarray, int]:
    data = _read_json(path)
    try:
        traces = np.asarray(data["traces"], dtype=np.float64)
        k = int(data["num_classes"])
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"malformed traces file: {exc}") from exc
    if traces.ndim != 2 or traces.size == 0 or not np.all(np.isfinite(traces)) or np.any(traces < 0):
        raise ConfigError("traces must be a nonempty 2-D array of nonnegative finite entropies")
    if k < 2:
        raise ConfigError("num_classes must be >= 2")
    return traces, k


def cmd_train_predictor(args) -> int:
    traces, k = _read_traces(args.traces)
    params = TrainParams(epochs=args.epochs, seed=args.seed or 0)
    p = distill_lut(train_predictor(traces, args.threshold, params, num_classes=k), args.bins)
    rows = json.loads(lut_to_json(p))
    if args.format == "csv":
        text = "bin_upper_edge,predicted_layer\n" + "".join(f"{e!r},{l}\n" for e, l in rows)
    else:
        text = json.dumps(rows) + "\n"
    _emit(text, args.out)
    labels = exit_layers(traces, args.threshold)
    preds = np.array([predict_exit_layer(p, h) for h in traces[:, 0]])
    sys.stderr.write(f"training exact-match {np.mean(preds == labels):.4f}\n")
    return 0


def cmd_make_traces(args) -> int:
    bundle = load_bundle(args.bundle) if args.bundle else random_bundle(
        EncoderConfig.toy(num_layers=args.layers), args.seed or 0
    )
    sentences = random_sentences(bundle.config, args.sentences, seed=(args.seed or 0) + 2)
    traces = _entropy_traces(Accelerator(bundle), sentences)
    _emit(dumps({"num_classes": bundle.config.num_classes, "traces": traces.tolist()}), args.out)
    return 0


def cmd_make_bundle(args) -> int:
    overrides = {"num_layers": args.layers}
    if args.vocab:
        overrides["vocab_size"] = args.vocab
    cfg = EncoderConfig.toy(**overrides) if args.preset == "toy" else EncoderConfig.albert_base(**overrides)
    spans = None
    if args.spans:
        spans = _parse_spans(_read_json(args.spans))
        if len(spans) != 1:
            raise ConfigError("make-bundle takes a single span list")
        spans = list(spans.values())[0].spans
    try:
        bundle = random_bundle(cfg, args.seed or 0, spans=spans, embedding_density=args.density)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_bundle(bundle, args.out)
    return 0


def cmd_envm_trials(args) -> int:
    tensor, bundle = _load_tensor_or_bundle(args.tensor)
    spec = dict(_read_json(args.config)) if args.config else {}
    if args.trials is not None:
        spec["trials"] = args.trials
    unknown = set(spec) - set(ENVM_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown envm keys {sorted(unknown)}")
    report = _envm_report(tensor, bundle, spec, args.seed or 0)
    if args.format == "csv":
        s = report["stats"]
        rows = [
            {"trial": i, "accuracy": a, "cell_flips": c, "weight_flips": w, "corrupted": x}
            for i, (a, c, w, x) in enumerate(zip(s["accuracies"], s["cell_flips"], s["weight_flips"], s["corrupted"]))
        ]
        text = _csv_text(rows, ("trial", "accuracy", "cell_flips", "weight_flips", "corrupted"))
    else:
        text = dumps(report)
    _emit(text, args.out)
    return 0


def cmd_power_on(args) -> int:
    tensor, _ = _load_tensor_or_bundle(args.tensor)
    spec = dict(_read_json(args.config)) if args.config else {}
    data_cfg = _cell(spec.pop("data_cell", "MLC2"))
    mask_cfg = _cell(spec.pop("mask_cell", "SLC"))
    cycles = int(spec.pop("power_cycles", 1))
    try:
        costs = MemoryCosts(**spec)
    except TypeError as exc:
        raise ConfigError(f"bad memory cost config: {exc}") from exc
    report = power_on_cost(tensor, data_cfg, costs, mask_cfg=mask_cfg, power_cycles=cycles)
    report["config"] = {"data_cell": data_cfg.to_dict(), "mask_cell": mask_cfg.to_dict(),
                        "costs": costs.to_dict(), "power_cycles": cycles}
    _emit(dumps(report), args.out)
    return 0


def _parse_spans(data) -> dict:
    if isinstance(data, list):
        data = {"spans": data}
    if not isinstance(data, dict) or not data:
        raise ConfigError("spans file must be a list or a name -> list object")
    try:
        return {name: AttentionSpans(v) for name, v in data.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad spans: {exc}") from exc


def cmd_flops(args) -> int:
    if args.spans == "table":
        named = dict(TABLE_SPANS)
    else:
        named = _parse_spans(_read_json(args.spans))
    overrides = _read_json(args.config) if args.config else {}
    try:
        cfg = EncoderConfig.albert_base(**overrides)
        for s in named.values():
            s.validate(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rows = []
    for name in sorted(named):
        r = flops_count(named[name], cfg)
        rows.append({"name": name, "spans": list(named[name]), **r})
    if args.format == "csv":
        text = _csv_text(rows, ("name", "dense_flops", "predicated_flops", "ratio"))
    else:
        text = dumps({"schema_version": REPORT_SCHEMA, "config": asdict(cfg), "results": rows})
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeinfer", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", default=None, help="output file (directory for run); stdout if omitted")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run a scenario file")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train-predictor", parents=[common], help="train and distill an exit predictor")
    p.add_argument("traces", help="JSON with num_classes and per-sentence entropy traces")
    p.add_argument("--threshold", type=float, required=True, help="entropy threshold")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--epochs", type=int, default=300)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("make-traces", parents=[common], help="entropy traces from a bundle")
    p.add_argument("--bundle", default=None)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--sentences", type=int, default=200)
    p.set_defaults(func=cmd_make_traces)

    p = sub.add_parser("make-bundle", parents=[common], help="write a synthetic bundle directory")
    p.add_argument("--preset", choices=("toy", "albert"), default="toy")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--vocab", type=int, default=None)
    p.add_argument("--density", type=float, default=0.4, help="embedding density after pruning")
    p.add_argument("--spans", default=None, help="JSON span list")
    p.set_defaults(func=cmd_make_bundle)

    p = sub.add_parser("envm-trials", parents=[common], help="fault-injection campaign")
    p.add_argument("tensor", help="bundle directory or bitmask tensor file")
    p.add_argument("--config", default=None, help="JSON with data_cell, mask_cell, trials, eval_sentences")
    p.add_argument("--trials", type=int, default=None)
    p.set_defaults(func=cmd_envm_trials)

    p = sub.add_parser("power-on", parents=[common], help="eNVM vs DRAM+SRAM power-on cost")
    p.add_argument("tensor", help="bundle directory or bitmask tensor file")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_power_on)

    p = sub.add_parser("flops", parents=[common], help="FLOPs saved by span predication")
    p.add_argument("spans", help="JSON span list or name -> list object; 'table' for the built-in spans")
    p.add_argument("--config", default=None, help="JSON of encoder config overrides")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
