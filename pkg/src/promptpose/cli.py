"""Command-line surface.

Subcommands: synth (scene generation), gen-prompts (positional prompt
synthesis), train, eval, infer, gradcheck. Exit codes: 0 success, 1 check
failure, 2 usage/IO error. Every run echoes its fully-resolved configuration
(seed included) next to its outputs, and all file writes are
temp-file + atomic-rename.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .annotations import (generate_prompt_annotations, parse_annotations,
                          write_annotations)
from .errors import ConfigError, PromptPoseError
from .gradcheck import check_blocks
from .losses import GroundTruth, LossConfig, total_loss
from .matching import hungarian  # noqa: F401  (re-export for scripting)
from .metrics import (EvalProtocol, evaluate_dataset, eval_samples_from_dataset,
                      evaluate_samples, read_predictions)
from .model import ModelConfig, PromptPoseNet
from .optim import AdamW, atomic_write_text, load_tensors, save_tensors
from .rle import rle_encode
from .scenes import SceneRecipe, scenes_to_dataset, synth_scene
from .training import run_training

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_WIDTH = 32


def _echo_config(directory, payload, stem="run_config"):
    os.makedirs(directory, exist_ok=True)
    atomic_write_text(os.path.join(directory, f"{stem}.json"),
                      json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dataset_path(data):
    return data if data.endswith(".json") else os.path.join(data, "annotations.json")


# -- synth ---------------------------------------------------------------------

def cmd_synth(args):
    recipe = SceneRecipe(num_persons=args.persons, image_size=args.size,
                         overlap=args.overlap, seed=args.seed, k=args.k)
    os.makedirs(args.out, exist_ok=True)
    scenes = [synth_scene(recipe, seed=args.seed + i) for i in range(args.scenes)]
    for i, scene in enumerate(scenes):
        save_tensors(os.path.join(args.out, f"scene_{i:04d}.tns"), {"image": scene.image})
    dataset = scenes_to_dataset(scenes, [args.size] * args.scenes, base_dir=args.out)
    write_annotations(dataset, os.path.join(args.out, "annotations.json"))
    _echo_config(args.out, {"command": "synth", "scenes": args.scenes,
                            "recipe": recipe.to_json()})
    print(f"scenes: {args.scenes}, persons: {len(dataset.annotations)}, "
          f"prompts: {len(dataset.prompts)}")
    return 0


# -- gen-prompts ----------------------------------------------------------------

def cmd_gen_prompts(args):
    dataset = parse_annotations(args.annotations)
    rng = np.random.default_rng(args.seed)
    records = generate_prompt_annotations(dataset, args.per_instance, rng)
    dataset.prompts = dataset.prompts + records
    write_annotations(dataset, args.out)
    out_dir = os.path.dirname(args.out) or "."
    stem = os.path.splitext(os.path.basename(args.out))[0] + ".run"
    _echo_config(out_dir, {"command": "gen-prompts", "annotations": args.annotations,
                           "per_instance": args.per_instance, "seed": args.seed,
                           "out": args.out}, stem=stem)
    kinds = [r.kind for r in records]
    print(f"scribbles: {kinds.count('scribble')}, points: {kinds.count('point')}")
    return 0


# -- train -----------------------------------------------------------------------

def _loss_csv(history):
    from .losses import COMPONENTS
    header = "step,total," + ",".join(COMPONENTS)
    rows = [header]
    for step, value, components in history:
        rows.append(f"{step},{value!r}," + ",".join(repr(components[c]) for c in COMPONENTS))
    return "\n".join(rows) + "\n"


def cmd_train(args):
    config = _load_json(args.config) if args.config else {}
    steps = args.steps if args.steps is not None else int(config.get("steps", 100))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    model_cfg = ModelConfig.from_json(config.get("model", {}))
    loss_cfg = LossConfig.from_json(config.get("loss", {}))
    opt_cfg = config.get("optimizer", {})
    checkpoint_every = int(config.get("checkpoint_every", 0))

    dataset = parse_annotations(_dataset_path(args.data))
    net = PromptPoseNet(model_cfg, seed=seed)
    optimizer = AdamW(net.store,
                      lr=float(opt_cfg.get("lr", 1e-4)),
                      backbone_lr=float(opt_cfg.get("backbone_lr", 1e-5)),
                      weight_decay=float(opt_cfg.get("weight_decay", 1e-4)))

    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "command": "train", "data": args.data, "steps": steps, "seed": seed,
        "model": model_cfg.to_json(),
        "loss": {name: getattr(loss_cfg, name) for name in
                 ("box_l1", "box_giou", "class_focal", "pose_l1", "pose_oks",
                  "pose_ce", "mask_dice", "mask_focal", "focal_alpha", "focal_gamma")},
        "optimizer": {"lr": optimizer.lr, "backbone_lr": optimizer.backbone_lr,
                      "weight_decay": optimizer.weight_decay},
        "checkpoint_every": checkpoint_every,
    }
    _echo_config(args.out, resolved)
    atomic_write_text(os.path.join(args.out, "model_config.json"),
                      json.dumps(model_cfg.to_json(), sort_keys=True, indent=1) + "\n")

    history = []

    def on_step(step, value, components, matched):
        history.append((step, value, components))
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            net.save(os.path.join(args.out, f"checkpoint_{step + 1:06d}.ckpt"))

    try:
        run_training(net, optimizer, dataset, steps, loss_cfg, seed, on_step=on_step)
    except FloatingPointError as exc:
        step = len(history)
        dump = {"step": step, "error": str(exc),
                "history_tail": [(s, v) for s, v, _ in history[-5:]]}
        atomic_write_text(os.path.join(args.out, "diagnostic_step.json"),
                          json.dumps(dump, sort_keys=True, indent=1) + "\n")
        atomic_write_text(os.path.join(args.out, "loss.csv"), _loss_csv(history))
        print(f"error: non-finite loss at step {step}; diagnostic written", file=sys.stderr)
        return 1

    atomic_write_text(os.path.join(args.out, "loss.csv"), _loss_csv(history))
    net.save(os.path.join(args.out, "checkpoint_final.ckpt"))
    final = history[-1][1] if history else float("nan")
    print(f"steps: {steps}, final loss: {final}")
    return 0


# -- eval -------------------------------------------------------------------------

def cmd_eval(args):
    dataset = parse_annotations(_dataset_path(args.data))
    protocol = EvalProtocol(ap_over=args.ap_over,
                            selection=args.selection,
                            tau=args.tau)
    if args.predictions:
        predictions = read_predictions(args.predictions)
        samples = eval_samples_from_dataset(dataset, predictions)
        report = evaluate_samples(samples, protocol)
        source = {"predictions": args.predictions}
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        model_cfg_path = args.model_config or os.path.join(
            os.path.dirname(args.checkpoint), "model_config.json")
        net = PromptPoseNet(ModelConfig.load(model_cfg_path), seed=0)
        net.load(args.checkpoint)
        report = evaluate_dataset(net, dataset, protocol, workers=args.workers)
        source = {"checkpoint": args.checkpoint, "model_config": model_cfg_path}

    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"command": "eval", "data": args.data, **source,
                            "ap_over": args.ap_over, "selection": args.selection,
                            "tau": args.tau, "workers": args.workers})
    atomic_write_text(os.path.join(args.out, "report.json"),
                      json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    atomic_write_text(os.path.join(args.out, "report.txt"), report.to_text())
    print(report.to_text(), end="")
    return 0


# -- infer ------------------------------------------------------------------------

def _parse_prompt_flags(args):
    from .annotations import PromptRecord

    given = [name for name, value in (("prompt", args.prompt), ("point", args.point),
                                      ("scribble", args.scribble)) if value]
    if len(given) != 1:
        raise ConfigError("provide exactly one of --prompt, --point, --scribble")
    if args.prompt:
        return PromptRecord(0, "text", text=args.prompt)
    if args.point:
        parts = args.point.split(",")
        if len(parts) != 2:
            raise ConfigError("--point expects 'x,y'")
        pt = np.array([[float(parts[0]), float(parts[1])]])
        return PromptRecord(0, "point", points=pt)
    pts = np.asarray(_load_json(args.scribble), dtype=float)
    if pts.shape != (12, 2):
        raise ConfigError(f"scribble file must hold 12 [x, y] points, got shape {pts.shape}")
    return PromptRecord(0, "scribble", points=pts)


def cmd_infer(args):
    prompt = _parse_prompt_flags(args)
    model_cfg_path = args.model_config or os.path.join(
        os.path.dirname(args.checkpoint), "model_config.json")
    net = PromptPoseNet(ModelConfig.load(model_cfg_path), seed=0)
    net.load(args.checkpoint)
    image = load_tensors(args.scene)["image"]
    result = net.infer(image, prompt)

    payload = {
        "group": result.group,
        "score": result.score,
        "pose": [[float(x), float(y)] for x, y in result.pose],
        "visibility": [float(v) for v in result.visibility],
        "box": [float(v) for v in result.box],
        "rle": rle_encode(result.mask.astype(np.uint8)).to_json(),
    }
    atomic_write_text(args.out, json.dumps(payload, sort_keys=True, indent=1) + "\n")
    out_dir = os.path.dirname(args.out) or "."
    stem = os.path.splitext(os.path.basename(args.out))[0] + ".run"
    _echo_config(out_dir, {"command": "infer", "checkpoint": args.checkpoint,
                           "scene": args.scene, "kind": prompt.kind, "out": args.out},
                 stem=stem)
    print(f"group: {result.group}, score: {result.score:.6f}")
    return 0


# -- gradcheck ----------------------------------------------------------------------

def gradcheck_loss_builder(net, seed):
    """Build a deterministic full-pipeline loss closure over one synthetic
    scene, summing one loss per prompt kind so both fusion branches and the
    text table receive gradients. The matched group is frozen so central
    differences see a locally smooth objective."""
    cfg = net.cfg
    recipe = SceneRecipe(num_persons=1, image_size=64, seed=seed, k=cfg.k)
    scene = synth_scene(recipe)
    image = scene.image
    gt = GroundTruth.from_annotation(scene.persons[0], 64, 64)
    prompts = {p.kind: p for p in scene.prompts}
    loss_cfg = LossConfig()

    frozen = {}
    for kind, prompt in prompts.items():
        preds, _, _ = net.forward(image, prompt)
        _, _, matched = total_loss(preds, gt, loss_cfg)
        frozen[kind] = matched

    def loss_fn():
        total = None
        for kind, prompt in prompts.items():
            preds, _, _ = net.forward(image, prompt)
            piece, _, _ = total_loss(preds, gt, loss_cfg, fixed_group=frozen[kind])
            total = piece if total is None else total + piece
        return total

    return loss_fn


def cmd_gradcheck(args):
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig.toy()
    if cfg.D > GRADCHECK_MAX_WIDTH:
        raise ConfigError(f"gradcheck needs a toy config with D <= {GRADCHECK_MAX_WIDTH}")
    if cfg.k not in (5, 17):
        raise ConfigError("gradcheck scenes support k in (5, 17)")
    net = PromptPoseNet(cfg, seed=args.seed)
    loss_fn = gradcheck_loss_builder(net, args.seed)
    report = check_blocks(loss_fn, net.store, seed=args.seed, n_coords=2,
                          corrupt=args.corrupt)
    failing = []
    for name in sorted(report):
        status = "ok" if report[name] < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{report[name]:.3e}  {status}  {name}")
        if report[name] >= GRADCHECK_TOLERANCE:
            failing.append(name)
    worst = max(report.values())
    print(f"max relative error: {worst:.3e} over {len(report)} parameter blocks")
    if failing:
        print("failing blocks: " + ", ".join(failing))
        return 1
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="promptpose",
                                     description="Promptable pose+mask estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes + annotations")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--persons", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlap", action="store_true")
    p.add_argument("--k", type=int, default=17, choices=(5, 17))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-prompts", help="synthesize scribble/point prompts")
    p.add_argument("--annotations", required=True)
    p.add_argument("--per-instance", type=int, default=1, dest="per_instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("train", help="train on a scene dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model-config", default=None, dest="model_config")
    p.add_argument("--predictions", default=None)
    p.add_argument("--ap-over", default="all", choices=("all", "top"), dest="ap_over")
    p.add_argument("--selection", default=None,
                   choices=("none", "l1", "iou", "intersection"))
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict pose + mask for one prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", default=None, dest="model_config")
    p.add_argument("--scene", required=True)
    p.add_argument("--prompt", default=None, help="text prompt")
    p.add_argument("--point", default=None, help="x,y pixel point prompt")
    p.add_argument("--scribble", default=None, help="JSON file with 12 [x,y] points")
    p.add_argument("--out", default="prediction.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PromptPoseError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
