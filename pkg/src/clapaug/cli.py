"""``clapaug`` command line: data generation, training, evaluation and sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from clapaug import __version__
from clapaug.augment import (FallbackGenerator, InContextBank, LlmGenerator, build_label_spec,
                             rewrite_captions)
from clapaug.checkpoint import load_checkpoint
from clapaug.config import load_config
from clapaug.contrastive import train
from clapaug.data import (EvalDataset, SampleRecord, ToySpec, generate_toy_dataset, load_eval_dataset,
                          load_label_specs, load_manifest, save_eval_dataset, save_label_specs,
                          save_manifest)
from clapaug.encoders import DualEncoder
from clapaug.errors import ClapAugError
from clapaug.evaluation import (eval_retrieval, format_table, label_embeddings, retrieval_matrix,
                                score_matrix, template_embeddings, to_csv, accuracy,
                                eval_multilabel_map)
from clapaug.llm import ChatClient, LlmClientConfig
from clapaug.sweep import AXES, model_config, run_sweep, sweep_csv, sweep_table, train_config

log = logging.getLogger("clapaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; every failure here exits 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _require_file(path, flag: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return Path(path)


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".errors.jsonl")


def _write_errors(out: Path, errors: list[dict]) -> None:
    side = _sidecar(out)
    if errors:
        _write_text(side, "".join(json.dumps(e, ensure_ascii=False) + "\n" for e in errors))
        log.error("%d item(s) failed; see %s", len(errors), side)
    elif side.exists():
        side.unlink()


def _generator(args, cfg):
    """Offline templates, or a chat endpoint configured by ``--llm-config``."""
    if args.offline_fallback:
        return FallbackGenerator(seed=args.seed), None
    llm = LlmClientConfig.from_dict(load_config(args.llm_config)["llm"])
    client = ChatClient(llm)
    bank = InContextBank.load(getattr(args, "bank", None), cfg["augment"]["in_context"], args.seed)
    return LlmGenerator(client, bank), client


def _map(client, fn, items):
    if client is None:
        out = []
        for item in items:
            try:
                out.append(fn(item))
            except Exception as exc:
                out.append(exc)
        return out
    return client.map(fn, items)


def _prepare_run_dir(out: Path, force: bool, produced: tuple[str, ...]) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to reuse it")
        for name in produced:
            target = out / name
            if target.is_dir():
                for f in target.glob("*.ckpt"):
                    f.unlink()
            elif target.exists():
                target.unlink()
    out.mkdir(parents=True, exist_ok=True)


# -- subcommands ----------------------------------------------------------------


def cmd_make_toy(args) -> int:
    spec = ToySpec(seed=args.seed)
    data = generate_toy_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(data.train, out / "train.jsonl")
    save_manifest([SampleRecord(r.id, r.caption, r.features, [], None, r.extra) for r in data.train],
                  out / "train_no_rewrites.jsonl")
    save_eval_dataset(data.eval, out / "eval.jsonl")
    save_label_specs(data.label_specs, out / "label_specs.jsonl")
    save_label_specs(data.lexicon_label_specs, out / "label_specs_lexicon.jsonl")
    _write_text(out / "labels.txt", "".join(f"{l}\n" for l in data.labels))
    _write_text(out / "toy_spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote toy corpus to {out}: {len(data.train)} train, {len(data.eval.ids)} eval, "
          f"{len(data.labels)} labels")
    return 0


def cmd_gen_rewrites(args) -> int:
    cfg = load_config(args.config, {"augment.k": args.k})
    k = cfg["augment"]["k"]
    src = _require_file(args.manifest, "--manifest")
    records = load_manifest(src)
    gen, client = _generator(args, cfg)
    try:
        results = _map(client, lambda r: rewrite_captions(r.caption, k, gen), records)
    finally:
        if client is not None:
            client.close()

    out = Path(args.out)
    errors = []
    for rec, res in zip(records, results):
        if isinstance(res, Exception):
            errors.append({"id": rec.id, "error": f"{type(res).__name__}: {res}"})
        else:
            rec.rewrites = list(res)
        if rec.features_path is not None:
            absolute = (src.parent / rec.features_path).resolve()
            rec.features_path = os.path.relpath(absolute, out.resolve().parent)
    save_manifest(records, out)
    _write_errors(out, errors)
    print(f"{len(records) - len(errors)}/{len(records)} records rewritten (k={k}) -> {out}")
    return 1 if errors else 0


def cmd_gen_prompts(args) -> int:
    cfg = load_config(args.config, {"prompt.t": args.t, "prompt.n": args.n})
    t, n = cfg["prompt"]["t"], cfg["prompt"]["n"]
    if t < 1 or n < 1:
        raise UsageError(f"--t and --n must be >= 1 (got t={t}, n={n})")
    labels = [l.strip() for l in _require_file(args.labels, "--labels").read_text(encoding="utf-8").splitlines() if l.strip()]
    if not labels:
        raise UsageError(f"no labels in {args.labels}")
    gen, client = _generator(args, cfg)
    try:
        results = _map(client, lambda l: build_label_spec(l, t, n, gen), labels)
    finally:
        if client is not None:
            client.close()
    out = Path(args.out)
    specs = [r for r in results if not isinstance(r, Exception)]
    errors = [{"label": l, "error": f"{type(r).__name__}: {r}"}
              for l, r in zip(labels, results) if isinstance(r, Exception)]
    save_label_specs(specs, out)
    _write_errors(out, errors)
    print(f"{len(specs)}/{len(labels)} label specs with {t}x{n} prompts -> {out}")
    return 1 if errors else 0


TRAIN_OUTPUTS = ("config.json", "config_sources.json", "loss.csv", "model.ckpt", "checkpoints", "train.log")


def cmd_train(args) -> int:
    overrides = {
        "train.seed": args.seed, "train.steps": args.steps, "train.epochs": args.epochs,
        "train.batch_size": args.batch_size, "train.learning_rate": args.lr,
        "augment.p": args.p, "augment.k": args.k,
    }
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    _prepare_run_dir(out, args.force, TRAIN_OUTPUTS)

    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    try:
        records = load_manifest(_require_file(args.manifest, "--manifest"), cfg["model"]["feature_dim"])
        if cfg["augment"]["p"] < 1.0 and cfg["augment"]["k"] > 0 and not any(r.rewrites for r in records):
            log.warning("no rewrites; effective p=1.0")
            for key, value in (("p", 1.0), ("k", 0)):
                cfg.values["augment"][key] = value
                cfg.sources["augment"][key] = "forced: manifest has no rewrites"
        cfg.write(out)
        seed = cfg["train"]["seed"]
        model = DualEncoder(model_config(cfg, seed))
        result = train(model, records, train_config(cfg, seed), out_dir=out)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    final = result.history[-1]
    print(f"trained {final['step']} steps; final loss {final['loss']:.6f}; tau {final['tau']:.4f}")
    return 0


def _load_model(path):
    _require_file(path, "--checkpoint")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_eval_zsac(args) -> int:
    cfg = load_config(args.config, {"eval.n_prompts": args.n_prompts, "eval.seed": args.seed,
                                    "prompt.template": args.template})
    model = _load_model(args.checkpoint)
    if args.label_specs:
        specs = load_label_specs(args.label_specs)
        labels = [s.label for s in specs]
    elif args.labels:
        specs = None
        labels = [l.strip() for l in _require_file(args.labels, "--labels").read_text(encoding="utf-8").splitlines() if l.strip()]
    else:
        raise UsageError("pass --label-specs (or --labels with --template-only)")
    if specs is None and not args.template_only:
        raise UsageError("prompt-augmented scoring needs --label-specs")

    ds: EvalDataset = load_eval_dataset(args.eval_data, labels)
    if ds.features.shape[1] != model.config.feature_dim:
        raise UsageError(f"eval features have dim {ds.features.shape[1]}, "
                         f"checkpoint expects {model.config.feature_dim}")
    audio = model.encode_audio(ds.features)
    n_prompts, seed = cfg["eval"]["n_prompts"], cfg["eval"]["seed"]

    conditions = []
    if not args.template_only:
        conditions.append(("prompt_aug", n_prompts, label_embeddings(model, specs, n_prompts, seed)))
    conditions.append(("template", 1, template_embeddings(model, labels, cfg["prompt"]["template"])))

    rows = []
    for name, n, embs in conditions:
        scores = score_matrix(audio, embs)
        if ds.multilabel:
            rows.append({"condition": name, "n_prompts": n, "seed": seed, "metric": "mAP",
                         "value": eval_multilabel_map(scores, ds.relevance)})
        else:
            rows.append({"condition": name, "n_prompts": n, "seed": seed, "metric": "accuracy",
                         "value": accuracy(scores, ds.targets)})
    cols = ["condition", "n_prompts", "seed", "metric", "value"]
    if args.out:
        _write_text(Path(args.out), to_csv(rows, cols))
    print(format_table(rows, cols))
    return 0


def cmd_eval_retrieval(args) -> int:
    model = _load_model(args.checkpoint)
    records = load_manifest(args.manifest, model.config.feature_dim)
    n = len(records)
    bad = [k for k in args.ks if not 1 <= k <= n]
    if bad:
        raise UsageError(f"k values {bad} outside [1, {n}] for a {n}-pair manifest")
    feats = np.stack([r.features for r in records]).astype(np.float64)
    res = eval_retrieval(retrieval_matrix(model, feats, [r.caption for r in records]), args.ks)
    rows = [{"direction": d, "k": k, "recall": v} for d, by_k in res.items() for k, v in by_k.items()]
    cols = ["direction", "k", "recall"]
    if args.out:
        _write_text(Path(args.out), to_csv(rows, cols))
    print(format_table(rows, cols))
    return 0


SWEEP_OUTPUTS = ("config.json", "config_sources.json", "sweep.csv", "sweep_table.txt")


def cmd_sweep(args) -> int:
    if args.axis not in AXES:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {', '.join(AXES)}")
    values = [int(v) if args.axis == "n_prompts" else v for v in args.values]
    if args.axis == "n_prompts" and any(v != int(v) for v in args.values):
        raise UsageError("n_prompts values must be integers")
    cfg = load_config(args.config, {"train.steps": args.steps})
    out = Path(args.out)
    _prepare_run_dir(out, args.force, SWEEP_OUTPUTS)
    cfg.write(out)
    rows = run_sweep(args.axis, values, args.seeds, cfg, control=not args.no_control,
                     on_row=lambda r: log.info("%s=%s seed=%s %s=%.4f", r["axis"], r["axis_value"],
                                               r["seed"], r["metric"], r["value"]))
    _write_text(out / "sweep.csv", sweep_csv(rows))
    table = sweep_table(rows)
    _write_text(out / "sweep_table.txt", table + "\n")
    print(table)
    return 0


# -- parser -----------------------------------------------------------------------


def _add_generator_flags(p) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--llm-config", help="config file whose 'llm' section names the chat endpoint")
    g.add_argument("--offline-fallback", action="store_true", help="deterministic template generator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clapaug", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy", help="write the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("gen-rewrites", help="add K caption rewrites to every manifest record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--bank", help="in-context exemplar file (default: bundled bank)")
    _add_generator_flags(p)
    p.set_defaults(func=cmd_gen_rewrites)

    p = sub.add_parser("gen-prompts", help="build t descriptions and n*t scene prompts per label")
    p.add_argument("--labels", required=True, help="text file, one label per line")
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=int)
    p.add_argument("--n", type=int)
    _add_generator_flags(p)
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("train", help="train a dual encoder on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-zsac", help="zero-shot classification with pooled prompts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--label-specs")
    p.add_argument("--labels", help="label list, for --template-only without specs")
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--template", help="template with a {label} field")
    p.add_argument("--template-only", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_eval_zsac)

    p = sub.add_parser("eval-retrieval", help="recall@k in both directions over manifest pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ks", type=_int_list, default=[1, 5, 10])
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("sweep", help="seeded toy sweep over n_prompts or p")
    p.add_argument("--axis", required=True, help="n_prompts or p")
    p.add_argument("--values", required=True, type=_float_list)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--no-control", action="store_true", help="skip the p=1.0 column")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(format="%(levelname)s: %(message)s")
    logging.getLogger("clapaug").setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clapaug: error: {exc}", file=sys.stderr)
        return 1
    except (ClapAugError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
