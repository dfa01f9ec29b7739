"""Single-sample training steps over synthetic or parsed datasets."""

from __future__ import annotations

import numpy as np

from .autodiff import backward
from .errors import InvalidInputError
from .losses import GroundTruth, total_loss


def pick_prompt(prompts_by_kind, rng):
    """Choose a prompt kind uniformly among the kinds this instance has,
    then a uniform record of that kind."""
    kinds = [k for k in ("text", "scribble", "point") if prompts_by_kind.get(k)]
    if not kinds:
        raise InvalidInputError("instance has no prompt records")
    kind = kinds[rng.integers(0, len(kinds))]
    records = prompts_by_kind[kind]
    return records[rng.integers(0, len(records))]


def train_step(net, optimizer, image, annotation, prompts_by_kind, loss_cfg, rng,
               image_wh=None):
    """Forward, loss, backward, optimizer step for one instance.

    Returns (total loss value, components dict, matched group index).
    """
    if image_wh is None:
        image_wh = (image.shape[2], image.shape[1])
    prompt = pick_prompt(prompts_by_kind, rng)
    gt = GroundTruth.from_annotation(annotation, *image_wh)

    net.store.zero_grads()
    preds, _, _ = net.forward(image, prompt)
    loss, components, matched = total_loss(preds, gt, loss_cfg)
    backward(loss)
    value = float(loss.item())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite training loss: {value}")
    optimizer.step()
    return value, components, matched


def training_samples(dataset):
    """Instances with grouped prompts plus their preloaded images."""
    samples = []
    for annotation, prompts_by_kind in dataset.instances():
        image_info = dataset.images[annotation.image_id]
        image = dataset.load_image(image_info)
        samples.append((image, annotation, prompts_by_kind))
    return samples


def run_training(net, optimizer, dataset, steps, loss_cfg, seed, on_step=None):
    """Cycle instances in dataset order for ``steps`` single-sample updates."""
    rng = np.random.default_rng(seed)
    samples = training_samples(dataset)
    if not samples and steps > 0:
        raise InvalidInputError("dataset has no trainable instances")
    history = []
    for step in range(steps):
        image, annotation, prompts = samples[step % len(samples)]
        value, components, matched = train_step(
            net, optimizer, image, annotation, prompts, loss_cfg, rng)
        history.append((step, value, components))
        if on_step is not None:
            on_step(step, value, components, matched)
    return history
