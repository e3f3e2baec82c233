"""Command-line entry point: gen, train, crossval, eval, infer, stats.

All randomness flows from --seed; identical resolved configs and inputs
produce byte-identical outputs.  Runtime failures exit 1 with a single
machine-parseable `error.<class>: message` line on stderr; usage errors
exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, report, stream, synthgen, training
from .errors import EyeexprError, InputError
from .labels import CLOSED_CLASSES, get_label_set
from .manifest import load_manifest, participants
from .preprocess import blink_filter, load_profile, save_profile
from .stats import paired_one_tailed_ttest, rater_agreement


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eyeexpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(g)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--participants", type=int)
    g.add_argument("--sessions", type=int)
    g.add_argument("--frames", type=int, help="frames per expression per session")
    g.add_argument("--frame-rate", type=float)
    g.add_argument("--hmd", type=int, choices=(1, 2))
    g.add_argument("--eye-size", help="per-eye HxW (default per HMD)")
    g.add_argument("--label-set", choices=("au10", "emo5"))
    g.add_argument("--skip-fraction", type=float)
    g.add_argument("--blink-rate", type=float)

    t = sub.add_parser("train", help="train a model on a dataset")
    _add_common(t)
    t.add_argument("--data", required=True, help="dataset directory (with manifest.jsonl)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--l2", type=float)
    t.add_argument("--personalize", choices=("on", "off"))
    t.add_argument("--input-size", help="network input HxW")
    t.add_argument("--threshold", type=float,
                   help="blink-filter threshold; filters training data when set")
    t.add_argument("--no-augment", action="store_true")

    c = sub.add_parser("crossval", help="participant-holdout cross-validation")
    _add_common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=int)
    c.add_argument("--seeds", type=int, help="number of seeds (seed, seed+1, ...)")
    c.add_argument("--epochs", type=int)
    c.add_argument("--batch", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--lr-decay", type=float)
    c.add_argument("--l2", type=float)
    c.add_argument("--personalize", choices=("on", "off", "both"), default="both")
    c.add_argument("--input-size", help="network input HxW")
    c.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--personalize", choices=("on", "off"),
                   help="default follows the checkpoint")

    i = sub.add_parser("infer", help="stream inference over a manifest")
    _add_common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", help="dataset directory to stream in manifest order")
    i.add_argument("--frames-from-stdin", action="store_true",
                   help="read 'left_path right_path' lines from stdin")
    i.add_argument("--profile", help="personalization profile (.eyep)")
    i.add_argument("--participant", type=int, help="restrict manifest streaming to one participant")
    i.add_argument("--session", type=int, help="restrict manifest streaming to one session")
    i.add_argument("--alpha", type=float)
    i.add_argument("--out", help="also write records and summary to this directory")

    s = sub.add_parser("stats", help="statistics utilities")
    stats_sub = s.add_subparsers(dest="stats_command", required=True)
    k = stats_sub.add_parser("kappa", help="inter-rater agreement from a ratings CSV")
    k.add_argument("--ratings", required=True, help="CSV with item_id, rater_id, label")
    k.add_argument("--mode", choices=("cohen", "fleiss"), default="fleiss")
    tt = stats_sub.add_parser("ttest", help="paired one-tailed t-test from a pairs CSV")
    tt.add_argument("--pairs", required=True,
                    help="CSV with participant_id, with_personalization, without_personalization")
    return parser


def _resolve(args, overrides: dict) -> dict:
    cfg = cfgmod.load_config_file(args.config) if args.config else cfgmod.default_config()
    overrides = dict(overrides)
    overrides.setdefault("seed", getattr(args, "seed", None))
    cfgmod.apply_overrides(cfg, overrides)
    return cfg


def _cmd_gen(args) -> int:
    cfg = _resolve(args, {
        "gen.participants": args.participants,
        "gen.sessions": args.sessions,
        "gen.frames_per_expression": args.frames,
        "gen.frame_rate": args.frame_rate,
        "gen.hmd": args.hmd,
        "gen.eye_size": list(cfgmod.parse_size(args.eye_size)) if args.eye_size else None,
        "gen.label_set": args.label_set,
        "gen.skip_fraction": args.skip_fraction,
        "gen.blink_rate": args.blink_rate,
    })
    gen_cfg = cfgmod.gen_config(cfg)
    samples = synthgen.generate_dataset(gen_cfg, args.out)
    cfgmod.write_resolved(cfg, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _train_overrides(args) -> dict:
    out = {
        "train.epochs": args.epochs,
        "train.batch": args.batch,
        "train.lr": args.lr,
        "train.lr_decay": args.lr_decay,
        "train.l2": args.l2,
        "train.input_size": list(cfgmod.parse_size(args.input_size)) if args.input_size else None,
    }
    if getattr(args, "no_augment", False):
        out["augment.enabled"] = False
    return out


def _load_dataset(data_dir):
    manifest_path = Path(data_dir) / "manifest.jsonl"
    if not manifest_path.exists():
        raise InputError(f"no manifest.jsonl under {data_dir}")
    samples = load_manifest(manifest_path)
    if not samples:
        raise InputError(f"{manifest_path} is empty")
    return samples


def _adopt_dataset_frame_rate(cfg: dict, data_dir) -> None:
    """Profile building follows the dataset's capture rate unless overridden."""
    if cfg["train"]["frame_rate"] != cfgmod.DEFAULTS["train"]["frame_rate"]:
        return
    resolved = Path(data_dir) / "config.resolved.json"
    if resolved.exists():
        try:
            data_cfg = json.loads(resolved.read_text(encoding="utf-8"))
            cfg["train"]["frame_rate"] = float(data_cfg["gen"]["frame_rate"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            pass


def _dataset_label_set(cfg: dict, samples) -> None:
    """Align the config's label set with what the manifest actually contains."""
    labels = {s.label for s in samples}
    for name in ("emo5", "au10"):
        if labels <= set(get_label_set(name).classes):
            cfg["gen"]["label_set"] = name
            return
    raise InputError(f"manifest labels {sorted(labels)} match no known label set")


def _apply_blink_filter(samples, data_dir, train_cfg, threshold, out_dir):
    closed = [c for c in train_cfg.label_set.classes if c in CLOSED_CLASSES]
    if not closed:
        raise InputError("blink filtering needs a closed-eyes class in the label set")
    blink_ckpt, _ = training.train_blink_classifier(samples, data_dir, train_cfg, closed[0])
    net = blink_ckpt.to_network()
    inputs = training.load_inputs(samples, data_dir, train_cfg.input_size)
    closed_idx = blink_ckpt.label_set.index("Closed")
    probs = np.concatenate([
        net.forward_probs(inputs[i : i + 64][..., None])[:, closed_idx]
        for i in range(0, len(inputs), 64)
    ])
    prob_of = {id(s): float(probs[i]) for i, s in enumerate(samples)}
    kept, filt_report = blink_filter(samples, lambda s: prob_of[id(s)], closed, threshold)
    (Path(out_dir) / "blink_filter.json").write_text(json.dumps({
        "examined": filt_report.examined,
        "removed": filt_report.removed,
        "removed_by_class": filt_report.removed_by_class,
        "threshold": threshold,
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return kept


def _cmd_train(args) -> int:
    cfg = _resolve(args, {**_train_overrides(args),
                          "train.personalize": args.personalize,
                          "train.blink_threshold": args.threshold})
    samples = _load_dataset(args.data)
    _dataset_label_set(cfg, samples)
    _adopt_dataset_frame_rate(cfg, args.data)
    train_cfg = cfgmod.train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["train"]["blink_threshold"] is not None:
        samples = _apply_blink_filter(samples, args.data, train_cfg,
                                      cfg["train"]["blink_threshold"], out)
    ckpt, trace = training.train(samples, args.data, train_cfg)
    training.save_checkpoint(ckpt, out / "model.eyem")
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, f"{v:.8f}"])
    report.loss_curve_figure(trace, out / "loss_curve.png")
    if train_cfg.personalization:
        inputs = training.load_inputs(samples, args.data, train_cfg.input_size)
        profiles = training.build_profiles(samples, inputs, train_cfg.frame_rate)
        prof_dir = out / "profiles"
        prof_dir.mkdir(exist_ok=True)
        for (pid, sid), prof in sorted(profiles.items()):
            save_profile(prof, prof_dir / f"p{pid:03d}_s{sid}.eyep")
    cfgmod.write_resolved(cfg, out)
    print(f"trained {train_cfg.epochs} epochs; final loss {trace[-1]:.6f}; "
          f"checkpoint at {out / 'model.eyem'}")
    return 0


def _cmd_crossval(args) -> int:
    cfg = _resolve(args, {**_train_overrides(args),
                          "eval.k": args.k,
                          "eval.seeds": args.seeds,
                          "train.personalize": args.personalize})
    samples = _load_dataset(args.data)
    _dataset_label_set(cfg, samples)
    _adopt_dataset_frame_rate(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode_arg = cfg["train"]["personalize"]
    modes = {"off": (False,), "on": (True,), "both": (False, True)}[mode_arg]
    pids = participants(samples)
    num_seeds = max(1, int(cfg["eval"]["seeds"]))
    base_seed = cfg["seed"]

    all_pairs_rows = []
    per_seed_summaries = []
    for seed in range(base_seed, base_seed + num_seeds):
        cfg_seed = dict(cfg)
        cfg_seed["seed"] = seed
        train_cfg = cfgmod.train_config(cfg_seed, personalization=False)
        plan = evaluation.make_folds(pids, cfg["eval"]["k"], seed=seed)
        result = evaluation.crossval(samples, args.data, train_cfg, plan, modes=modes,
                                     aggregate=cfg["eval"]["aggregate"])
        tag = f"seed{seed}"
        for mode_name, reports in result.fold_reports.items():
            for fold, rep in enumerate(reports):
                report.write_metrics_csv(rep, out / f"fold{fold}_{mode_name}_{tag}.csv")
        for mode_name, rep in result.pooled.items():
            report.write_report_files(rep, out, f"pooled_{mode_name}_{tag}",
                                      title=f"Pooled ({mode_name}, seed {seed})")
        summary = {"seed": seed,
                   "pooled_accuracy": {m: r.mean_accuracy for m, r in result.pooled.items()}}
        if result.paired is not None:
            for pid, w, wo in zip(result.paired.participant_ids,
                                  result.paired.with_personalization,
                                  result.paired.without_personalization):
                all_pairs_rows.append((seed, pid, w, wo))
            summary["ttest"] = {
                "t": result.ttest.t, "df": result.ttest.degrees_of_freedom,
                "p": result.ttest.p, "degenerate": result.ttest.degenerate,
            }
        per_seed_summaries.append(summary)

    if all_pairs_rows:
        with open(out / "pairs.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "participant_id", "with_personalization",
                             "without_personalization"])
            for row in all_pairs_rows:
                writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])
        tt = paired_one_tailed_ttest([r[2] for r in all_pairs_rows],
                                     [r[3] for r in all_pairs_rows])
        (out / "ttest.json").write_text(json.dumps({
            "t": tt.t, "df": tt.degrees_of_freedom, "p": tt.p,
            "n_pairs": tt.n_pairs, "mean_difference": tt.mean_difference,
            "degenerate": tt.degenerate,
        }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(
        json.dumps(per_seed_summaries, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    cfgmod.write_resolved(cfg, out)
    print(f"crossval complete: {len(per_seed_summaries)} seed(s), results in {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args, {})
    ckpt = training.load_checkpoint(args.checkpoint)
    samples = _load_dataset(args.data)
    _adopt_dataset_frame_rate(cfg, args.data)
    mode = ckpt.personalization if args.personalize is None else args.personalize == "on"
    rep, _ = evaluation.evaluate(ckpt, samples, args.data, personalize_mode=mode,
                                 frame_rate=cfg["train"]["frame_rate"])
    out = Path(args.out)
    report.write_report_files(rep, out, "report", title="Evaluation")
    cfgmod.write_resolved(cfg, out)
    print(f"mean accuracy {rep.mean_accuracy:.4f}; report in {out}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _resolve(args, {"stream.alpha": args.alpha})
    ckpt = training.load_checkpoint(args.checkpoint)
    profile = None
    if args.profile:
        profile = load_profile(args.profile)
    if args.frames_from_stdin:
        pairs = []
        for line in sys.stdin:
            parts = line.split()
            if len(parts) == 2:
                pairs.append((parts[0], parts[1]))
        root = "."
    elif args.data:
        samples = _load_dataset(args.data)
        _adopt_dataset_frame_rate(cfg, args.data)
        if args.participant is not None:
            samples = [s for s in samples if s.participant_id == args.participant]
        if args.session is not None:
            samples = [s for s in samples if s.session_id == args.session]
        if not samples:
            raise InputError("no frames match the participant/session filters")
        if ckpt.personalization and profile is None:
            # enrollment: build the profile from this stream's own neutral frames
            inputs = training.load_inputs(samples, args.data, ckpt.input_size)
            profiles = training.build_profiles(samples, inputs, cfg["train"]["frame_rate"],
                                               require_all=False)
            key = samples[0].key()
            if key not in profiles:
                raise InputError(
                    f"cannot enroll: no neutral frames for participant {key[0]}, session {key[1]}"
                )
            profile = profiles[key]
        pairs = [(s.left_path, s.right_path) for s in samples]
        root = args.data
    else:
        raise InputError("infer needs --data or --frames-from-stdin")

    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    record_fh = open(out_dir / "records.jsonl", "w", encoding="utf-8") if out_dir else None

    class _Tee:
        def write(self, text):
            sys.stdout.write(text)
            if record_fh:
                record_fh.write(text)

        def flush(self):
            sys.stdout.flush()

    summary = stream.stream_run(ckpt, pairs, data_root=root, profile=profile,
                                alpha=cfg["stream"]["alpha"],
                                frame_rate=cfg["train"]["frame_rate"],
                                out=_Tee(), summary_out=sys.stderr)
    if out_dir:
        record_fh.close()
        (out_dir / "summary.json").write_text(summary.to_json() + "\n", encoding="utf-8")
        if profile is not None:
            save_profile(profile, out_dir / "profile.eyep")
        cfgmod.write_resolved(cfg, out_dir)
    return 0


def _read_ratings_csv(path) -> np.ndarray:
    by_item: dict[str, dict[str, str]] = {}
    raters: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise InputError(f"{path}: no ratings")
    start = 1 if [c.strip().lower() for c in rows[0][:3]] == ["item_id", "rater_id", "label"] else 0
    for row in rows[start:]:
        if len(row) < 3:
            raise InputError(f"{path}: expected item_id, rater_id, label rows")
        item, rater, label = row[0].strip(), row[1].strip(), row[2].strip()
        by_item.setdefault(item, {})[rater] = label
        if rater not in raters:
            raters.append(rater)
    items = sorted(by_item)
    matrix = np.empty((len(items), len(raters)), dtype=object)
    for i, item in enumerate(items):
        for j, rater in enumerate(raters):
            if rater not in by_item[item]:
                raise InputError(f"{path}: item {item} missing a rating from {rater}")
            matrix[i, j] = by_item[item][rater]
    return matrix


def _cmd_stats(args) -> int:
    if args.stats_command == "kappa":
        matrix = _read_ratings_csv(args.ratings)
        kappa = rater_agreement(matrix, mode=args.mode)
        print(json.dumps({"kappa": kappa, "mode": args.mode,
                          "items": matrix.shape[0], "raters": matrix.shape[1]},
                         sort_keys=True))
        return 0
    if args.stats_command == "ttest":
        with_vals, without_vals = [], []
        with open(args.pairs, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                with_vals.append(float(row["with_personalization"]))
                without_vals.append(float(row["without_personalization"]))
        tt = paired_one_tailed_ttest(with_vals, without_vals)
        print(json.dumps({"t": tt.t, "df": tt.degrees_of_freedom, "p": tt.p,
                          "n_pairs": tt.n_pairs, "degenerate": tt.degenerate}, sort_keys=True))
        return 0
    raise InputError(f"unknown stats command {args.stats_command!r}")


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "crossval": _cmd_crossval,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "stats": _cmd_stats,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EyeexprError as exc:
        print(f"error.{exc.slug}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error.io: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
