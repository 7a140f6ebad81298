"""Command surface tying the pipeline together.

Subcommands: gen-data, pretrain-lm, train, eval, ablate, infer, plot, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 invalid config/arguments.
Environment overrides: IFLIP_SEED, IFLIP_OUT.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit, lmhead, plotting, synthdata, textproto, train as train_mod
from .config import ConfigError, RunConfig, flat_defaults, load_config
from .model import collate


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    env_seed = os.environ.get("IFLIP_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
        cfg.train.seed = int(env_seed)
    env_out = os.environ.get("IFLIP_OUT")
    if env_out:
        cfg.out_dir = env_out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    cfg.validate()
    return cfg


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return _apply_overrides(cfg, args)


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_domain_dirs(data_dir: Path, pattern: str) -> list[tuple[str, list]]:
    domains = []
    for sub in sorted(data_dir.glob(pattern)):
        samples, spec = synthdata.load_split(sub)
        domains.append((spec.name, samples))
    return domains


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    n = args.n or cfg.data.n_train
    out = _out_dir(cfg, args)
    spec = synthdata.meta_domain_spec(cfg.data.image_size, cfg.data.granularity,
                                      cfg.data.base_seed, cfg.data.domain_name)
    train_split = synthdata.make_split(spec, n, cfg.data.balanced)
    eval_split = synthdata.make_split(spec, cfg.data.n_eval, cfg.data.balanced,
                                      index_offset=n)
    synthdata.save_split(train_split, spec, out / "meta_train")
    synthdata.save_split(eval_split, spec, out / "meta_eval")
    for i, target in enumerate(synthdata.make_target_domains(spec, cfg.data.n_targets)):
        split = synthdata.make_split(target, cfg.data.n_eval, cfg.data.balanced)
        synthdata.save_split(split, target, out / f"target_{i + 1}")
    print(f"wrote meta_train ({n}), meta_eval ({cfg.data.n_eval}), "
          f"{cfg.data.n_targets} target domains ({cfg.data.n_eval} each) to {out}")
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    vocab = textproto.default_vocabulary()
    granularities = tuple(int(g) for g in args.granularities.split(",")) if args.granularities \
        else (cfg.data.granularity,)
    corpus = lmhead.build_lm_corpus(vocab, granularities)
    lm, report = lmhead.pretrain_tiny_lm(vocab, cfg.lm, corpus, seed=cfg.lm.pretrain_seed)
    lmhead.save_lm(lm, vocab, out, report)
    print(json.dumps(report, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    samples, _ = synthdata.load_split(Path(args.data) / "meta_train")
    lm = vocab = None
    if cfg.toggles().head_mode == "frozen_lm":
        if not args.lm:
            print("error: --lm is required in frozen_lm head mode", file=sys.stderr)
            return 2
        lm, vocab, _ = lmhead.load_lm(args.lm)
    result = train_mod.fit(cfg, samples, lm, vocab=vocab, out_dir=out,
                           log_every=args.log_every)
    print(json.dumps({"final": result.manifest["final"],
                      "config_hash": result.manifest["config_hash"]}, indent=1))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model = train_mod.load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    domains = _load_domain_dirs(data_dir, "target_*")
    report, sets = evalkit.run_protocol(model, domains, cfg.eval)
    payload = report.as_dict()
    payload["scores"] = [
        {"domain_id": s.domain_id, "scores": s.scores.tolist(), "labels": s.labels.tolist()}
        for s in sets
    ]
    if args.answers:
        eval_samples, _ = synthdata.load_split(data_dir / "meta_eval")
        n = min(len(eval_samples), cfg.eval.answer_eval_n)
        payload["content_answers"] = evalkit.content_answer_accuracy(model, eval_samples[:n])
    out = _out_dir(cfg, args)
    (out / "report.json").write_text(json.dumps(payload, indent=1))
    print(report.table())
    if "content_answers" in payload:
        ca = payload["content_answers"]
        print(f"content answer accuracy: {ca['accuracy']:.4f} "
              f"(malformed {ca['malformed_rate']:.4f}, n={ca['n']})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.data)
    meta_train, _ = synthdata.load_split(data_dir / "meta_train")
    meta_eval, _ = synthdata.load_split(data_dir / "meta_eval")
    targets = _load_domain_dirs(data_dir, "target_*")
    vocab = textproto.default_vocabulary()

    lm_cache: dict[tuple[int, ...], lmhead.TinyLM] = {}

    def lm_provider(granularities: tuple[int, ...]) -> lmhead.TinyLM:
        key = tuple(sorted(set(granularities)))
        if key not in lm_cache:
            if key == (cfg.data.granularity,) and args.lm:
                lm_cache[key] = lmhead.load_lm(args.lm)[0]
            else:
                corpus = lmhead.build_lm_corpus(vocab, key)
                lm_cache[key] = lmhead.pretrain_tiny_lm(vocab, cfg.lm, corpus)[0]
        return lm_cache[key]

    if args.epochs:
        cfg.train.epochs = args.epochs
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = evalkit.run_ablations(cfg, args.suite, meta_train, meta_eval, targets,
                                   lm_provider, seeds=seeds, progress=True)
    out = _out_dir(cfg, args)
    (out / f"ablation_{args.suite}.json").write_text(
        json.dumps({k: v for k, v in result.items() if k != "table"}, indent=1))
    print(result["table"])
    return 0


def _read_image(path: Path, image_size: int) -> np.ndarray:
    if path.suffix == ".npy":
        img = np.load(path)
    else:
        from PIL import Image
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    if img.shape[:2] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} image, got {img.shape}")
    return img.astype(np.float32)


def cmd_infer(args) -> int:
    model = train_mod.load_checkpoint(args.ckpt)
    if args.llm_free:
        model.lm = None
    img = _read_image(Path(args.image), model.cfg.data.image_size)
    images = collate([synthdata.Sample(
        image=img, content_label=0,
        style=synthdata.StyleSpec("normal", "indoor", "high"),
        mask=np.zeros(img.shape[:2], dtype=np.float32), domain_id="infer", seed=0,
    )]).images
    result = model.infer(images, decode=not args.llm_free)
    payload = {"fake_score": result.fake_scores[0], "answers": result.answers[0]}
    if result.cue_maps is not None:
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        cue_path = out / (Path(args.image).stem + "_cue.png")
        plotting.save_cue_png(result.cue_maps[0], cue_path)
        payload["cue_png"] = str(cue_path)
    print(json.dumps(payload, indent=1))
    return 0


def cmd_plot(args) -> int:
    did = False
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.run:
        plotting.save_loss_curves_png(Path(args.run) / "metrics.jsonl", out / "loss_curves.png")
        print(f"wrote {out / 'loss_curves.png'}")
        did = True
    if args.report:
        payload = json.loads(Path(args.report).read_text())
        sets = [evalkit.ScoreSet(np.array(s["scores"]), np.array(s["labels"]), s["domain_id"])
                for s in payload.get("scores", [])]
        if sets:
            plotting.save_roc_png(sets, out / "roc.png")
            print(f"wrote {out / 'roc.png'}")
            did = True
    if args.ckpt and args.data:
        model = train_mod.load_checkpoint(args.ckpt)
        samples, _ = synthdata.load_split(Path(args.data) / "meta_eval")
        batch = collate(samples[:32])
        result = model.infer(batch.images, decode=False)
        if result.cue_maps is not None:
            plotting.save_cue_grid_png(result.cue_maps, out / "cue_grid.png")
            print(f"wrote {out / 'cue_grid.png'}")
            did = True
    if not did:
        print("error: nothing to plot, pass --run, --report, or --ckpt with --data",
              file=sys.stderr)
        return 2
    return 0


def cmd_gradcheck(args) -> int:
    components = None if args.components == "all" else args.components.split(",")
    results = train_mod.gradcheck(components, trials=args.trials,
                                  tolerance=args.tol, seed=args.seed or 0)
    rows = [[r.component, f"{r.max_rel_err:.3e}", str(r.n_coords),
             "ok" if r.ok else f"FAIL {r.worst}"] for r in results]
    print(evalkit.format_table(["component", "max rel err", "coords", "status"], rows))
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    defaults = "\n".join(f"  {k} = {v!r}" for k, v in flat_defaults())
    parser = argparse.ArgumentParser(
        prog="iflip",
        description="Instruction-tuned dual-branch face anti-spoofing benchmark.",
        epilog="config keys and defaults (TOML or JSON):\n" + defaults,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", "-c", help="TOML or JSON config file")
        if out:
            p.add_argument("--out", "-o", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("gen-data", help="write meta + target splits")
    p.add_argument("--spec", dest="config", help="config file (data section)")
    p.add_argument("--n", type=int, help="training split size override")
    common(p, config=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-lm", help="pretrain and freeze the tiny LM")
    common(p)
    p.add_argument("--granularities", help="comma list of content granularities (default: config)")
    p.set_defaults(fn=cmd_pretrain_lm)

    p = sub.add_parser("train", help="fit a model on the meta split")
    common(p)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--lm", help="pretrained LM checkpoint directory")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run the unified protocol on target domains")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint directory")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--answers", action="store_true",
                   help="also report content answer accuracy on meta_eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    common(p)
    p.add_argument("--suite", required=True, choices=evalkit.ABLATION_SUITES)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", help="pretrained LM checkpoint directory")
    p.add_argument("--seeds", help="comma list of seeds (default: config replicates)")
    p.add_argument("--epochs", type=int, help="override epochs for the suite")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("infer", help="score one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PNG/JPG or .npy image file")
    p.add_argument("--llm-free", action="store_true", help="skip answer decoding")
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("plot", help="ROC / cue-map / loss-curve PNGs")
    p.add_argument("--run", help="train output directory (loss curves)")
    p.add_argument("--report", help="eval report.json (ROC)")
    p.add_argument("--ckpt", help="checkpoint (cue grid, with --data)")
    p.add_argument("--data", help="data directory (cue grid)")
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--components", default="all")
    p.add_argument("--trials", type=int, default=64)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:  # console script
    sys.exit(main())
