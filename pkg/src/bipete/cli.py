"""Command-line entry point: gen, preprocess, train, ablate, explain."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attribution as attr
from . import datapipe as dp
from . import metrics
from . import numerics as nx
from . import training as tr
from .model import DegenerateFoldError, ModelConfig, load_checkpoint, make_batch, forward, predict_instances

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_DEGENERATE = 4

log = logging.getLogger("bipete")


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run manifest


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs, t0: float) -> Path:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in sorted(set(map(Path, outputs)))},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    fields = {}
    if args.spec:
        try:
            fields = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CLIError(f"cannot read generator spec {args.spec}: {err}") from err
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.n_patients is not None:
        fields["n_patients"] = args.n_patients
    try:
        spec = dp.GeneratorSpec.from_json(fields)
        records, manifest = dp.generate(spec)
    except dp.ConfigError as err:
        raise CLIError(f"invalid generator spec: {err}") from err
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dp.write_jsonl(out, (r.to_json() for r in records))
    man_path = out.parent / "manifest.json"
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out.parent, "gen", manifest["spec"], spec.seed, [args.spec] if args.spec else [], [out, man_path], t0)
    print(f"wrote {len(records)} patients ({manifest['n_cases']} cases) to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    t0 = time.perf_counter()
    try:
        records = dp.read_patients(args.inp)
    except OSError as err:
        raise CLIError(f"cannot read {args.inp}: {err}") from err
    vocab = dp.Vocabulary.load(args.use_vocab) if args.use_vocab else None
    encoded, vocab, report = dp.preprocess(
        records, window_days=args.window_days, min_visits=args.min_visits,
        merge_days=args.merge_days, max_seq_len=args.max_seq_len, vocab=vocab,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dp.write_jsonl(out, (x.to_json() for x in encoded))
    vocab_path = Path(args.vocab)
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    report_path = Path(args.report) if args.report else out.parent / "preprocess_report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    cfg = {"window_days": args.window_days, "min_visits": args.min_visits, "merge_days": args.merge_days,
           "max_seq_len": args.max_seq_len}
    write_run_manifest(out.parent, "preprocess", cfg, None, [args.inp], [out, vocab_path, report_path], t0)
    r = report.to_json()
    print(f"encoded {r['n_encoded']} of {r['n_input']} patients; rejected {r['n_rejected']} {r['rejected_by_reason']}")
    return EXIT_OK


def _load_encoded(path) -> list[dp.EncodedInstance]:
    try:
        data = dp.read_encoded(path)
    except OSError as err:
        raise CLIError(f"cannot read {path}: {err}") from err
    if not data:
        raise CLIError(f"{path} contains no instances")
    return data


def _vocab_size(args, data) -> int:
    if args.vocab:
        return len(dp.Vocabulary.load(args.vocab))
    return int(max(max(x.token_ids, default=0) for x in data)) + 1


def _configs(args, data) -> tuple[ModelConfig, tr.TrainConfig]:
    try:
        mc = ModelConfig(
            vocab_size=_vocab_size(args, data), d_model=args.d_model, n_heads=args.n_heads,
            n_layers=args.n_layers, d_ff=args.d_ff or 4 * args.d_model, gru_hidden=args.gru_hidden or args.d_model,
            dropout=args.dropout, max_seq_len=args.max_seq_len,
        )
        tc = tr.TrainConfig(
            lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size, max_epochs=args.epochs,
            patience=args.patience, seed=args.seed, precision=args.precision, stopping=args.stopping,
        )
    except ValueError as err:
        raise CLIError(f"invalid configuration: {err}") from err
    return mc, tc


def _run_modes(args, modes) -> int:
    t0 = time.perf_counter()
    data = _load_encoded(args.data)
    mc, tc = _configs(args, data)
    out = Path(args.out)
    results = tr.run_ablation(data, mc, tc, modes=modes, k=args.folds, jobs=args.jobs)
    written = tr.write_cv_outputs(results, mc, tc, out)
    if not args.no_plots:
        written += _plots(results, out)
    cfg = {"model": mc.to_dict(), "train": asdict(tc), "modes": list(modes), "folds": args.folds}
    write_run_manifest(out, args.command, cfg, args.seed, [args.data], written, t0)
    _print_summary(results)
    return EXIT_OK


def _plots(results, out: Path) -> list[Path]:
    from . import plotting

    paths = []
    curves = {m: (np.concatenate([f.test_scores for f in r.folds]), np.concatenate([f.test_labels for f in r.folds]))
              for m, r in results.items()}
    paths.append(plotting.plot_roc(curves, out / "roc.svg"))
    paths.append(plotting.plot_pr(curves, out / "pr.svg"))
    for m, r in results.items():
        logs = [f.runlog for f in r.folds if f.runlog is not None]
        if logs:
            paths.append(plotting.plot_training_curves(logs, out / m / "training_curves.svg", title=m))
    return paths


def _print_summary(results) -> None:
    print("config\tauroc\tauprc")
    for m, r in results.items():
        s = r.summary()
        print(f"{m}\t{s['auroc']['mean']:.4f} ± {s['auroc']['std']:.4f}\t{s['auprc']['mean']:.4f} ± {s['auprc']['std']:.4f}")


def cmd_train(args) -> int:
    return _run_modes(args, [args.mode])


def cmd_ablate(args) -> int:
    return _run_modes(args, args.modes)


def cmd_explain(args) -> int:
    t0 = time.perf_counter()
    try:
        params, mc, manifest = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as err:
        raise CLIError(f"cannot load checkpoint {args.checkpoint}: {err}") from err
    data = _load_encoded(args.data)
    if args.fold is not None:
        folds = dp.kfold_split([x.label for x in data], k=args.folds, seed=args.seed)
        if not 0 <= args.fold < len(folds):
            raise CLIError(f"--fold must lie in [0, {len(folds)})")
        _, _, data = tr.fold_data(data, folds[args.fold])
    vocab = dp.Vocabulary.load(args.vocab) if args.vocab else None
    steps = 256 if args.verify else args.steps
    prec = "f64" if args.verify else args.precision
    try:
        cfg = attr.IGConfig(steps=steps, target=args.target)
    except ValueError as err:
        raise CLIError(str(err)) from err
    with nx.precision(prec):
        p = attr.frozen(params, nx.get_dtype())
        probs = predict_instances(data, p, mc)
        attrs = attr.attribute_all(data, p, mc, cfg, jobs=args.jobs)
    labels = np.array([x.label for x in data])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    attr_path = out.parent / "attributions.csv"
    attr.write_attributions(attrs, attr_path, vocab)
    report = attr.completeness_report(attrs, steps)
    comp_path = out.parent / "completeness.json"
    comp_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    written = [attr_path, comp_path]
    if args.attention:
        written.append(_export_attention(data, p, mc, Path(args.attention)))
    print(f"max completeness gap at m={steps}: {report['max_gap']:.3e}")
    table = attr.relative_contribution(attrs, probs, labels, min_freq=args.min_freq, vocab=vocab)
    table.to_csv(out)
    written.append(out)
    cfg_doc = {"steps": steps, "target": args.target, "precision": prec, "min_freq": args.min_freq,
               "checkpoint": str(args.checkpoint), "fold": args.fold}
    write_run_manifest(out.parent, "explain", cfg_doc, args.seed, [args.checkpoint, args.data], written, t0)
    print(f"RC table: {len(table.rows)} tokens kept, {len(table.sign_mismatch)} sign-mismatch, "
          f"{table.n_frequency_excluded} below frequency ({table.n_tp} TP, {table.n_tn} TN)")
    return EXIT_OK


def _export_attention(data, params, mc, path: Path) -> Path:
    """Per-instance attention maps [n_layers, n_heads, L, L] in one .npz keyed by patient id."""
    if params.arch != "bipete":
        raise CLIError("attention export needs a transformer checkpoint")
    maps = {}
    with nx.no_record():
        for x in data:
            _, m = forward(make_batch([x]), params, mc, return_attention=True)
            maps[x.patient_id] = m[0]
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **maps)
    return path


# --------------------------------------------------------------------------
# parser


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="encoded.jsonl")
    p.add_argument("--vocab", help="vocab.json (sets the embedding table size)")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--d-model", type=int, default=72)
    p.add_argument("--n-heads", type=int, default=9)
    p.add_argument("--n-layers", type=int, default=6)
    p.add_argument("--d-ff", type=int, default=None, help="default 4 * d-model")
    p.add_argument("--gru-hidden", type=int, default=None, help="default d-model")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-seq-len", type=int, default=dp.MAX_SEQ_LEN)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--stopping", choices=("per_fold", "cv_mean"), default="per_fold")
    p.add_argument("--precision", choices=("f32", "f64"), default=os.environ.get("BIPETE_PRECISION", "f32"))
    p.add_argument("--no-plots", action="store_true", help="skip SVG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bipete", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort with planted motifs")
    p.add_argument("--spec", help="generator spec JSON (fields of GeneratorSpec)")
    p.add_argument("--out", required=True, help="patients.jsonl")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-patients", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("preprocess", help="merge, window, tokenize and encode patient records")
    p.add_argument("--in", dest="inp", required=True, help="patients.jsonl")
    p.add_argument("--out", required=True, help="encoded.jsonl")
    p.add_argument("--vocab", required=True, help="vocab.json to write")
    p.add_argument("--use-vocab", help="encode against an existing vocab.json instead of building one")
    p.add_argument("--report", help="rejection report path (default: next to --out)")
    p.add_argument("--window-days", type=int, default=dp.WINDOW_DAYS)
    p.add_argument("--min-visits", type=int, default=dp.MIN_VISITS)
    p.add_argument("--merge-days", type=int, default=dp.MERGE_DAYS)
    p.add_argument("--max-seq-len", type=int, default=dp.MAX_SEQ_LEN)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="k-fold training of one configuration")
    _add_model_args(p)
    p.add_argument("--mode", choices=tr.ALL_MODES, default="both")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="k-fold training of every positional variant and baseline")
    _add_model_args(p)
    p.add_argument("--modes", nargs="+", choices=tr.ALL_MODES, default=list(tr.ABLATION_MODES))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="integrated gradients and relative-contribution table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="encoded.jsonl (test instances, or all with --fold)")
    p.add_argument("--vocab", help="vocab.json for readable token names")
    p.add_argument("--fold", type=int, default=None, help="restrict --data to this test fold")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--target", choices=attr.TARGETS, default="prob")
    p.add_argument("--min-freq", type=float, default=0.01)
    p.add_argument("--verify", action="store_true", help="256 steps in 64-bit; prints the max completeness gap")
    p.add_argument("--precision", choices=("f32", "f64"), default=os.environ.get("BIPETE_PRECISION", "f32"))
    p.add_argument("--attention", help="also export attention maps to this .npz")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="rc_table.csv")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CLIError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except tr.FoldFailed as err:
        print(f"error: {err}", file=sys.stderr)
        return _code_for(err.cause)
    except Exception as err:  # noqa: BLE001 - mapped to exit codes below
        code = _code_for(err)
        if code is None:
            raise
        print(f"error: {err}", file=sys.stderr)
        return code


def _code_for(err: BaseException) -> int | None:
    if isinstance(err, (tr.TrainingDiverged, nx.NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(err, (DegenerateFoldError, attr.EmptyGroupError, metrics.UndefinedMetricError)):
        return EXIT_DEGENERATE
    if isinstance(err, (dp.InputError, dp.ConfigError, ValueError, IndexError, OSError)):
        return EXIT_INPUT
    return None


if __name__ == "__main__":
    sys.exit(main())
