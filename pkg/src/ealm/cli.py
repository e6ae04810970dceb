"""Command-line entry point: ``ealm <subcommand> --config FILE --seed N --out-dir DIR``.

Every subcommand reads and writes artifacts in the run directory (see
:mod:`ealm.pipeline.workspace`). Failures print one tab-separated line
``error<TAB><ErrorClass><TAB><message>`` to stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .errors import ConfigError, EALMError
from .pipeline.config import ExperimentConfig, load_config
from .pipeline.evaluate import comparison_rows, evaluate_perplexity, write_nll_sidecar, write_report
from .pipeline.experiments import (build_vocab, emit_trace, encode_sets, run_entity, run_fusion, run_pretrain,
                                   run_retrain, stage_seed, swap_entity_model)
from .pipeline.workspace import Workspace
from .textdata.synthetic import build_synthetic_data


def _meta(args, cfg_hash: str, **extra) -> dict:
    return {"seed": args.seed, "config_sha256": cfg_hash, **extra}


def cmd_gen_corpus(args, cfg: ExperimentConfig, ws: Workspace) -> str:
    data = build_synthetic_data(cfg.data, stage_seed(args.seed, "data"))
    data.save(ws.data_dir)
    return f"wrote {sum(len(c) for c in data.corpora.values())} utterances to {ws.data_dir}"


def cmd_tokenizer_train(args, cfg, ws) -> str:
    vocab = build_vocab(cfg, ws.load_data())
    vocab.save(ws.vocab_path)
    return f"vocab of {len(vocab)} tokens, sha256 {vocab.content_hash()}"


def cmd_pretrain(args, cfg, ws) -> str:
    _, ckpt = run_pretrain(cfg, ws.load_data(), ws.load_vocab(), args.seed)
    return f"pretrained checkpoint sha256 {ckpt.save(ws.pretrained_path)}"


def cmd_train_entity(args, cfg, ws) -> str:
    data, vocab, pretrained = ws.load_data(), ws.load_vocab(), ws.load_pretrained()
    types = args.entity_type or list(cfg.data.entity_types)
    out = []
    for t in types:
        if t not in data.catalogues:
            raise ConfigError(f"unknown entity type {t!r}")
        if args.with_new:
            deployed = ws.load_entity(t) if ws.entity_path(t).exists() else None
            result = run_retrain(cfg, data, vocab, pretrained, t, args.seed, deployed)
            for e in result.skipped:
                print(f"skipped\t{t}\t{e}", file=sys.stderr)
        else:
            result = run_entity(cfg, data, vocab, pretrained, t, args.seed, args.fraction)
        path = ws.entity_path(t, args.tag)
        path.parent.mkdir(parents=True, exist_ok=True)
        out.append(f"{t}: sha256 {result.checkpoint.save(path)}")
    return "; ".join(out)


def cmd_train_fusion(args, cfg, ws) -> str:
    data, vocab, pretrained = ws.load_data(), ws.load_vocab(), ws.load_pretrained()
    models = {t: ws.load_entity(t) for t in cfg.data.entity_types}
    _, ckpt, _ = run_fusion(cfg, data, vocab, pretrained, models, args.seed)
    digest = ckpt.save(ws.fusion_path)
    ws.write_manifest(ckpt)
    return f"fusion checkpoint sha256 {digest}"


def _component_hashes(ws: Workspace, ealm) -> dict:
    out = {"vocab": ws.load_vocab().content_hash(), "manifest": ealm.manifest_hash()}
    out.update({f"component.{k}": v for k, v in ealm.manifest().items()})
    return out


def cmd_eval(args, cfg, ws) -> str:
    data, vocab, ealm = ws.load_data(), ws.load_vocab(), ws.load_ealm()
    sets = encode_sets(vocab, data, args.test_sets or cfg.test_sets)
    vh = vocab.content_hash()
    base = {n: evaluate_perplexity(ealm.pretrained, s, n, vh, vocab.pad_id) for n, s in sets.items()}
    new = {n: evaluate_perplexity(ealm, s, n, vh, vocab.pad_id) for n, s in sets.items()}
    for n in sets:
        write_nll_sidecar(ws.reports / f"eval.{n}.pretrained.nll", base[n])
        write_nll_sidecar(ws.reports / f"eval.{n}.ealm.nll", new[n])
    path = ws.reports / "eval.tsv"
    write_report(path, comparison_rows(base, new), _meta(args, args.config_hash, **_component_hashes(ws, ealm)))
    return "; ".join(f"{n}: {100 * new[n].relative_reduction(base[n]):.2f}%" for n in sets)


def cmd_swap(args, cfg, ws) -> str:
    data, vocab, ealm = ws.load_data(), ws.load_vocab(), ws.load_ealm()
    t = args.entity_type[0] if args.entity_type else cfg.swap_entity_type
    ckpt_path = Path(args.checkpoint) if args.checkpoint else ws.entity_path(t, "new")
    if not ckpt_path.exists():
        raise ConfigError(f"{ckpt_path} not found; run `train-entity --with-new --tag new` first")
    swapped = swap_entity_model(ealm, t, Checkpoint.load(ckpt_path))
    sets = encode_sets(vocab, data, args.test_sets or ("general", "new"))
    vh = vocab.content_hash()
    rows = []
    for n, s in sets.items():
        base = evaluate_perplexity(ealm.pretrained, s, n, vh, vocab.pad_id)
        pre = evaluate_perplexity(ealm, s, n, vh, vocab.pad_id)
        post = evaluate_perplexity(swapped, s, n, vh, vocab.pad_id)
        write_nll_sidecar(ws.reports / f"swap.{n}.pre.nll", pre)
        write_nll_sidecar(ws.reports / f"swap.{n}.post.nll", post)
        rows.append({"test_set": n, "pretrained_ppl": base.perplexity, "pre_swap_ppl": pre.perplexity,
                     "post_swap_ppl": post.perplexity, "pre_swap_reduction": pre.relative_reduction(base),
                     "post_swap_reduction": post.relative_reduction(base),
                     "relative_ppl_change": (post.perplexity - pre.perplexity) / pre.perplexity})
    meta = _meta(args, args.config_hash, entity_type=t, pre_manifest=ealm.manifest_hash(),
                 post_manifest=swapped.manifest_hash(), swapped_checkpoint=Checkpoint.load(ckpt_path).content_hash())
    write_report(ws.reports / "swap.tsv", rows, meta)
    return "; ".join(f"{r['test_set']}: {100 * r['pre_swap_reduction']:.2f}% -> {100 * r['post_swap_reduction']:.2f}%"
                     for r in rows)


def cmd_fraction_study(args, cfg, ws) -> str:
    data, vocab, pretrained = ws.load_data(), ws.load_vocab(), ws.load_pretrained()
    fractions = sorted(cfg.fractions)
    models = {f: {t: run_entity(cfg, data, vocab, pretrained, t, args.seed, f) for t in cfg.data.entity_types}
              for f in fractions}
    for f, rs in models.items():
        for t, r in rs.items():
            path = ws.entity_path(t, f"fraction{int(round(f * 100))}")
            path.parent.mkdir(parents=True, exist_ok=True)
            r.checkpoint.save(path)
    ealm, fckpt, _ = run_fusion(cfg, data, vocab, pretrained, {t: r.model for t, r in models[fractions[0]].items()},
                                args.seed)
    fckpt.save(ws.root / f"fusion.fraction{int(round(fractions[0] * 100))}.ckpt")
    sets = encode_sets(vocab, data, args.test_sets or ("general", "tail", "tailnew"))
    vh = vocab.content_hash()
    base = {n: evaluate_perplexity(pretrained, s, n, vh, vocab.pad_id) for n, s in sets.items()}
    rows = []
    for f in fractions:
        e = ealm
        for t, r in models[f].items():
            e = e.swap(t, r.model)
        row = {"fraction": f}
        for n, s in sets.items():
            rep = evaluate_perplexity(e, s, n, vh, vocab.pad_id)
            write_nll_sidecar(ws.reports / f"fraction{int(round(f * 100))}.{n}.nll", rep)
            row[f"{n}_ppl"] = rep.perplexity
            row[f"{n}_reduction"] = rep.relative_reduction(base[n])
        rows.append(row)
    write_report(ws.reports / "fraction.tsv", rows, _meta(args, args.config_hash, fusion=fckpt.content_hash()))
    key = "tail" if "tail" in sets else next(iter(sets))
    return "; ".join(f"{r['fraction']:g}: {100 * r[f'{key}_reduction']:.2f}%" for r in rows)


def cmd_trace(args, cfg, ws) -> str:
    vocab, ealm = ws.load_vocab(), ws.load_ealm()
    path = ws.reports / "trace.tsv"
    trace = emit_trace(ealm, vocab, args.text, path)
    return f"{len(trace.tokens)} rows written to {path}"


COMMANDS = {
    "tokenizer-train": (cmd_tokenizer_train, "train the BPE vocabulary on the generated corpus"),
    "gen-corpus": (cmd_gen_corpus, "generate catalogues, pools, training corpora and test sets"),
    "pretrain": (cmd_pretrain, "train the pre-trained LM"),
    "train-entity": (cmd_train_entity, "train entity models (optionally on a catalogue fraction or with new entities)"),
    "train-fusion": (cmd_train_fusion, "train the fusion layer over frozen components"),
    "eval": (cmd_eval, "perplexity of the pre-trained LM and the composed model per test set"),
    "swap": (cmd_swap, "hot-swap one entity model and compare before/after"),
    "fraction-study": (cmd_fraction_study, "catalogue-fraction study with fusion trained on the smallest fraction"),
    "trace": (cmd_trace, "per-token interpolation trace for one utterance"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ealm", description="Entity-aware language models at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)
        if name in ("train-entity", "swap"):
            p.add_argument("--entity-type", action="append", help="entity type (repeatable)")
        if name == "train-entity":
            p.add_argument("--fraction", type=float, default=1.0, help="catalogue fraction in (0, 1]")
            p.add_argument("--with-new", action="store_true",
                           help="retrain with the held-out new entities at the top of the popularity ranking, "
                                "continuing from entity/<type>.ckpt when present")
            p.add_argument("--tag", default="", help="checkpoint name suffix, e.g. 'new'")
        if name == "swap":
            p.add_argument("--checkpoint", help="replacement entity checkpoint (default entity/<type>.new.ckpt)")
        if name in ("eval", "swap", "fraction-study"):
            p.add_argument("--test-sets", nargs="+", help="test sets to evaluate")
        if name == "trace":
            p.add_argument("--text", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
            cfg_text = Path(args.config).read_text(encoding="utf-8")
        else:
            cfg_text, cfg = "", ExperimentConfig()
        args.config_hash = hashlib.sha256(cfg_text.encode()).hexdigest()
        ws = Workspace(args.out_dir)
        ws.root.mkdir(parents=True, exist_ok=True)
        fn, _ = COMMANDS[args.command]
        msg = fn(args, cfg, ws)
    except (EALMError, OSError, KeyError) as e:
        text = str(e).replace("\n", " ").replace("\t", " ")
        print(f"error\t{type(e).__name__}\t{text}", file=sys.stderr)
        return 2
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
