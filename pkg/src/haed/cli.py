"""Command line entry points.

Subcommands: `corpus build`, `train`, `adapt`, `lm train-ngram`,
`decode`, `evaluate`, `ilm check`, `report`. Every command is driven by
one JSON config file plus flag overrides (`--set dotted.key=value`), and
is reproducible from (config, seed) alone. Exit codes: 0 success,
1 usage error, 2 runtime failure. The HAED_RUN_ROOT environment variable
overrides the default run root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args):
    from .config import RunConfig, default_run_config

    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = default_run_config()
    for override in getattr(args, "set", None) or []:
        cfg = _apply_override(cfg, override)
    return cfg


def _apply_override(cfg, override: str):
    from .config import ConfigError, RunConfig

    if "=" not in override:
        raise UsageError(f"--set expects dotted.key=value, got {override!r}")
    key, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = cfg.to_dict()
    node = d
    parts = key.split(".")

    def step(container, part, assign=None):
        if isinstance(container, list):
            try:
                idx = int(part)
                container[idx]
            except (ValueError, IndexError):
                raise UsageError(f"--set: unknown config path {key!r}")
            if assign is not None:
                container[idx] = assign[0]
            return container[idx]
        if not isinstance(container, dict) or part not in container:
            raise UsageError(f"--set: unknown config path {key!r}")
        if assign is not None:
            container[part] = assign[0]
        return container[part]

    for part in parts[:-1]:
        node = step(node, part)
    step(node, parts[-1], assign=(value,))
    try:
        return RunConfig.from_dict(d)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _add_common(p):
    p.add_argument("--config", help="JSON run config (defaults used if omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set trainer.max_steps=500")


def build_parser() -> _Parser:
    parser = _Parser(prog="haed", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    corpus = sub.add_parser("corpus", help="synthetic corpus commands")
    corpus_sub = corpus.add_subparsers(dest="subcommand", metavar="subcommand")
    cb = corpus_sub.add_parser("build", help="generate features + manifests")
    _add_common(cb)
    cb.add_argument("--out", required=True, help="output corpus directory")
    cb.add_argument("--seed", type=int, default=1, help="generation seed")

    tr = sub.add_parser("train", help="train a model")
    _add_common(tr)
    tr.add_argument("--data", required=True, help="corpus directory from `corpus build`")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--max-steps", type=int, default=None)
    tr.add_argument("--resume", default=None, help="checkpoint dir to resume from")

    ad = sub.add_parser("adapt", help="text-only decoder adaptation")
    _add_common(ad)
    ad.add_argument("--baseline", required=True, help="baseline checkpoint dir")
    ad.add_argument("--text", required=True, help="text-only manifest")
    ad.add_argument("--alpha", type=float, default=None)
    ad.add_argument("--lr", type=float, default=None)
    ad.add_argument("--sweeps", type=int, default=None)
    ad.add_argument("--out", required=True, help="adapted checkpoint dir")

    lm = sub.add_parser("lm", help="language model commands")
    lm_sub = lm.add_subparsers(dest="subcommand", metavar="subcommand")
    ng = lm_sub.add_parser("train-ngram", help="fit a backoff n-gram on text")
    _add_common(ng)
    ng.add_argument("--text", required=True, help="manifest providing token sequences")
    ng.add_argument("--order", type=int, default=None)
    ng.add_argument("--discount", type=float, default=None)
    ng.add_argument("--out", required=True, help="output model file")

    de = sub.add_parser("decode", help="beam-search a test set")
    _add_common(de)
    de.add_argument("--ckpt", required=True)
    de.add_argument("--manifest", required=True)
    de.add_argument("--out", required=True, help="transcript JSONL path")
    de.add_argument("--beam", type=int, default=None)
    de.add_argument("--beta", type=float, default=None)
    de.add_argument("--fusion", choices=["none", "shallow", "density_ratio"], default=None)
    de.add_argument("--target-lm", default=None, help="n-gram model file")
    de.add_argument("--source-lm", default=None, help="n-gram model file")
    de.add_argument("--prune-threshold", type=float, default=None)

    ev = sub.add_parser("evaluate", help="score transcripts against references")
    _add_common(ev)
    ev.add_argument("--transcripts", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True, help="eval report JSON path")
    ev.add_argument("--ckpt", default=None, help="optional checkpoint for decoder PPL")
    ev.add_argument("--tag", action="append", default=[], metavar="KEY=VALUE",
                    help="attach metadata used by `report` table grouping")

    ilm = sub.add_parser("ilm", help="internal LM analysis")
    ilm_sub = ilm.add_subparsers(dest="subcommand", metavar="subcommand")
    ic = ilm_sub.add_parser("check", help="constant-acoustic identity + beam agreement")
    _add_common(ic)
    ic.add_argument("--ckpt", required=True)
    ic.add_argument("--manifest", required=True)
    ic.add_argument("--out", required=True)
    ic.add_argument("--beam", type=int, default=4)
    ic.add_argument("--probes", type=int, default=20)

    rp = sub.add_parser("report", help="emit tables and plots for a run directory")
    _add_common(rp)
    rp.add_argument("--run", required=True)
    rp.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _cmd_corpus_build(args) -> int:
    from .corpus import build_dataset

    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "corpus_config.json"))
    manifests = build_dataset(cfg.corpus, args.out, args.seed)
    print(json.dumps({"manifests": manifests, "config": cfg.fingerprint()}, indent=2))
    return 0


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    mdir = os.path.join(args.data, "manifests")
    general = cfg.corpus.domains[0].name if cfg.corpus.domains else "general"
    result = train(
        cfg,
        os.path.join(mdir, f"{general}_train.jsonl"),
        os.path.join(mdir, f"{general}_dev.jsonl"),
        args.out,
        max_steps=args.max_steps,
        resume_from=args.resume,
    )
    print(json.dumps({
        "checkpoint": result.checkpoint_dir,
        "metrics": result.metrics_path,
        "steps": result.steps,
        "last_eval": result.last_eval,
        "config": cfg.fingerprint(),
    }, indent=2))
    return 0


def _cmd_adapt(args) -> int:
    from .adaptation import adapt_decoder
    from .checkpoint import load_checkpoint
    from .config import RunConfig, build_model_from_snapshot
    from .data import load_utterances

    baseline = load_checkpoint(args.baseline)
    cfg = RunConfig.from_dict(baseline.config)
    acfg = cfg.adaptation
    if args.alpha is not None:
        acfg.alpha = args.alpha
    if args.lr is not None:
        acfg.lr = args.lr
    if args.sweeps is not None:
        acfg.sweeps = args.sweeps
    text = load_utterances(args.text, with_features=False)
    ckpt = adapt_decoder(baseline, text, acfg, args.out, build_model_from_snapshot)
    print(json.dumps({"checkpoint": ckpt.directory, "steps": ckpt.metadata["extra"]["adaptation"]["steps"]}, indent=2))
    return 0


def _cmd_lm_train_ngram(args) -> int:
    from .data import load_utterances
    from .ngram import ngram_train

    cfg = _load_config(args)
    order = args.order if args.order is not None else cfg.decoding.ngram_order
    discount = args.discount if args.discount is not None else cfg.decoding.ngram_discount
    tok = cfg.corpus.tokenizer()
    utts = load_utterances(args.text, with_features=False)
    lm = ngram_train([u.tokens for u in utts], order, tok.vocab_size, tok.sos_id, tok.eos_id, discount)
    lm.save(args.out)
    print(json.dumps({"model": args.out, "order": order, "sequences": len(utts)}, indent=2))
    return 0


def _cmd_decode(args) -> int:
    from .checkpoint import load_checkpoint, load_into_model
    from .config import RunConfig, build_model_from_snapshot
    from .data import load_utterances
    from .decoding import FusionConfig, decode_set, write_transcripts
    from .ngram import NGramLM

    ckpt = load_checkpoint(args.ckpt)
    cfg = RunConfig.from_dict(ckpt.config)
    dcfg = cfg.decoding
    model = build_model_from_snapshot(ckpt.config)
    load_into_model(model, ckpt)
    model.eval()
    tok = cfg.corpus.tokenizer()
    fusion = FusionConfig(
        mode=args.fusion if args.fusion is not None else dcfg.fusion_mode,
        target_weight=dcfg.target_lm_weight,
        source_weight=dcfg.source_lm_weight,
    )
    target_lm = NGramLM.load(args.target_lm) if args.target_lm else None
    source_lm = NGramLM.load(args.source_lm) if args.source_lm else None
    utts = load_utterances(args.manifest)
    records = decode_set(
        model,
        utts,
        tok,
        beam_size=args.beam if args.beam is not None else dcfg.beam_size,
        beta=args.beta if args.beta is not None else dcfg.beta,
        fusion=fusion,
        target_lm=target_lm,
        source_lm=source_lm,
        prune_threshold=args.prune_threshold if args.prune_threshold is not None else dcfg.prune_threshold,
        length_normalize=dcfg.length_normalize,
    )
    write_transcripts(args.out, records)
    errors = sum(1 for r in records if r.error)
    print(json.dumps({"transcripts": args.out, "utterances": len(records), "errors": errors}, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    from .config import RunConfig
    from .data import load_utterances
    from .decoding import read_transcripts
    from .metrics import evaluate

    tags = {}
    for kv in args.tag:
        if "=" not in kv:
            raise UsageError(f"--tag expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        tags[k] = v
    transcripts = read_transcripts(args.transcripts)
    refs = load_utterances(args.manifest, with_features=False)
    ppl = None
    fingerprint = ""
    if args.ckpt:
        from .checkpoint import load_checkpoint, load_into_model
        from .config import build_model_from_snapshot
        from .lm import lm_perplexity

        ckpt = load_checkpoint(args.ckpt)
        cfg = RunConfig.from_dict(ckpt.config)
        fingerprint = cfg.fingerprint()
        model = build_model_from_snapshot(ckpt.config)
        load_into_model(model, ckpt)
        if model.lm is not None:
            ppl = lm_perplexity(model.lm, [u.tokens for u in refs], cfg.corpus.tokenizer().eos_id)
    cfg = _load_config(args)
    tok = cfg.corpus.tokenizer()
    report = evaluate(transcripts, refs, tok, ppl=ppl,
                      config_fingerprint=fingerprint or cfg.fingerprint(), tags=tags)
    report.save(args.out)
    print(json.dumps({"report": args.out, "wer": report.overall.wer,
                      "ter": report.overall.token_error_rate, "ppl": report.ppl}, indent=2))
    return 0


def _cmd_ilm_check(args) -> int:
    from .checkpoint import load_checkpoint, load_into_model
    from .config import build_model_from_snapshot
    from .data import load_utterances
    from .model import ilm_consistency_check

    ckpt = load_checkpoint(args.ckpt)
    model = build_model_from_snapshot(ckpt.config)
    load_into_model(model, ckpt)
    utts = load_utterances(args.manifest)[: args.probes]
    rep = ilm_consistency_check(model, utts, beam_size=args.beam)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(rep.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(rep.to_dict(), indent=2))
    return 0 if rep.identity_ok else 2


def _cmd_report(args) -> int:
    from .reporting import report

    outputs = report(args.run, args.out)
    print(json.dumps(outputs, indent=2))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cmd = getattr(args, "command", None)
        sub = getattr(args, "subcommand", None)
        if cmd == "corpus" and sub == "build":
            return _cmd_corpus_build(args)
        if cmd == "train":
            return _cmd_train(args)
        if cmd == "adapt":
            return _cmd_adapt(args)
        if cmd == "lm" and sub == "train-ngram":
            return _cmd_lm_train_ngram(args)
        if cmd == "decode":
            return _cmd_decode(args)
        if cmd == "evaluate":
            return _cmd_evaluate(args)
        if cmd == "ilm" and sub == "check":
            return _cmd_ilm_check(args)
        if cmd == "report":
            return _cmd_report(args)
        raise UsageError("missing or unknown command; see --help")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
