"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint
from .config import RunConfig, load_config
from .data import DataConfig, build_train_data, dump_pairs, make_image_set, make_synthetic_pairs
from .errors import ConfigError
from .evaluation import attention_rollout, linear_probe, retrieval_eval, write_pgm
from .gradcheck import run_suite
from .model import MoMoModel
from .training import model_from_checkpoint, run_stage, transition


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="momo", description="Shared-encoder multimodal pretraining at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one stage or the whole pipeline")
    t.add_argument("--stage", required=True, choices=["1", "2", "3", "all"])
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint of the same stage to continue from")
    t.add_argument("--init", help="previous-stage checkpoint (default: OUT/stage{k-1}.momo)")
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2/3 without a previous stage")
    t.add_argument("--out", default="runs")

    e = sub.add_parser("eval", help="retrieval recall or linear probe")
    e.add_argument("task", choices=["retrieval", "probe"])
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", required=True)

    a = sub.add_parser("attn", help="attention-rollout heatmap for a masked caption word")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--pair-index", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--token", type=int, default=3, help="caption word index, 1-based after [CLS] (default: shape)")
    a.add_argument("--config", help="data section source (default: built-in data config, seed 0)")
    a.add_argument("--scale", type=int, default=1, help="integer upscaling of the heatmap")

    g = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    g.add_argument("--f64", action="store_true")

    d = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--image-size", type=int, default=32)
    return p


def _data_for(cfg: RunConfig):
    mc = cfg.model
    return build_train_data(cfg.data, mc.image_size, mc.patch_size, cfg.seed)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = _data_for(cfg)
    out = Path(args.out)
    if args.stage == "all":
        order = sorted(s.stage for s in cfg.stages)
        if not order:
            raise ConfigError("config lists no stages")
    else:
        order = [int(args.stage)]
    init = args.init
    for k in order:
        scfg = cfg.stage(k)
        run_hash = cfg.run_hash(scfg)
        if args.resume:
            ckpt = read_checkpoint(args.resume)
            model = model_from_checkpoint(ckpt)
            result = run_stage(scfg, model, data, seed=cfg.seed, out_dir=out, resume=ckpt, run_hash=run_hash)
        else:
            prev = 1 if scfg.combined_stages23 else k - 1
            source = init or (out / f"stage{prev}.momo")
            if k == 1:
                model = MoMoModel(cfg.model, seed=cfg.seed)
            elif Path(source).exists():
                model = transition(source, scfg, seed=cfg.seed)
            elif args.from_scratch:
                model = MoMoModel(cfg.model, seed=cfg.seed)
            else:
                raise ConfigError(f"stage {k} needs a stage-{prev} checkpoint ({source} not found); "
                                  "pass --init or --from-scratch")
            result = run_stage(scfg, model, data, seed=cfg.seed, out_dir=out, run_hash=run_hash)
        init = None
        last = result.metrics[-1] if result.metrics else {}
        _emit({"stage": k, "steps": result.step, "checkpoint": str(result.checkpoint_path),
               "final_loss": last.get("loss_total")})
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = model_from_checkpoint(read_checkpoint(args.ckpt))
    if args.task == "retrieval":
        _emit(retrieval_eval(model, _data_for(cfg).pairs).as_dict())
    else:
        mc, ev = model.cfg, cfg.eval
        train = make_image_set(ev.probe_train, mc.image_size, seed=cfg.seed * 7 + 11, patch_size=mc.patch_size)
        test = make_image_set(ev.probe_test, mc.image_size, seed=cfg.seed * 7 + 13, patch_size=mc.patch_size)
        r = linear_probe(model, train, test, ev.probe_epochs)
        _emit({"train_accuracy": r.train_accuracy, "test_accuracy": r.test_accuracy, "n_classes": r.n_classes})
    return 0


def cmd_attn(args) -> int:
    model = model_from_checkpoint(read_checkpoint(args.ckpt))
    if args.config:
        cfg = load_config(args.config)
        data_cfg, seed = cfg.data, cfg.seed
    else:
        data_cfg, seed = DataConfig(), 0
    data = build_train_data(data_cfg, model.cfg.image_size, model.cfg.patch_size, seed)
    if not 0 <= args.pair_index < len(data.pairs):
        raise ConfigError(f"pair index {args.pair_index} outside [0, {len(data.pairs)})")
    pair = data.pairs[args.pair_index]
    heat = attention_rollout(model, pair, model.cfg.n_patches + args.token)
    path = write_pgm(args.out, heat, args.scale)
    word = pair.caption.text.split()[args.token - 1] if 1 <= args.token <= len(pair.caption.text.split()) else "?"
    _emit({"out": str(path), "caption": pair.caption.text, "word": word, "grid": list(heat.shape)})
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(f64=args.f64)
    for name, report in results:
        print(f"{name:<20} {report}")
    ok = all(r.passed for _, r in results)
    print(f"gradcheck ({'f64' if args.f64 else 'f32'}): {'PASS' if ok else 'FAIL'} "
          f"{sum(r.passed for _, r in results)}/{len(results)}")
    return 0 if ok else 2


def cmd_gen_data(args) -> int:
    pairs = make_synthetic_pairs(args.n, args.image_size, args.seed)
    path = dump_pairs(pairs, args.out, args.seed)
    _emit({"out": str(path), "n": len(pairs)})
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attn": cmd_attn, "gradcheck": cmd_gradcheck,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
