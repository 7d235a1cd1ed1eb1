"""Two-stage optimization driver.

Stage "pretrain" aligns the visual stack to the frozen language model with
text + projection losses; stage "instruction" adds mask and classification
supervision and adapts the language model only through low-rank adapters.
A StagePlan names which parameter groups train and which stay frozen; the
step loop verifies the freezing contract on every step and appends one JSON
line per step to the loss log.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FreezingViolation
from .tensor import Tensor, backward, dump_tensor, load_tensor

STAGES = ("pretrain", "instruction")


@dataclass
class StagePlan:
    stage: str
    trainable: list               # parameter-name prefixes
    frozen: list
    steps: int = 100
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")

    def _match(self, name: str, prefixes) -> bool:
        return any(name == p or name.startswith(p + ".") for p in prefixes)

    def split(self, params: dict) -> tuple:
        """(trainable names, frozen names); every name must fall in exactly
        one set."""
        train, frozen = [], []
        for name in params:
            t = self._match(name, self.trainable)
            f = self._match(name, self.frozen)
            if t and f:
                raise ConfigError(f"{name} is both trainable and frozen")
            if not t and not f:
                raise ConfigError(f"{name} not covered by the stage plan")
            (train if t else frozen).append(name)
        return train, frozen

    def apply(self, params: dict) -> tuple:
        train, frozen = self.split(params)
        for name in train:
            params[name].requires_grad = True
        for name in frozen:
            params[name].requires_grad = False
            params[name].grad = None
        return train, frozen


class Adam:
    """Standard Adam with bias correction, keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, names: list):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in names:
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


def train_step(loss_fn, params: dict, plan: StagePlan, opt: Adam) -> dict:
    """One optimizer step. loss_fn() -> (total loss Tensor, term dict).

    Raises FreezingViolation if any frozen parameter accumulates gradient,
    and by construction never updates frozen values.
    """
    train, frozen = plan.apply(params)
    total, terms = loss_fn()
    backward(total)
    for name in frozen:
        if params[name].grad is not None:
            raise FreezingViolation(f"gradient reached frozen parameter {name}")
    opt.step(params, train)
    zero_grads(params)
    record = dict(terms)
    record["total"] = float(total.data)
    record["stage"] = plan.stage
    return record


class LossLog:
    """Append-only JSONL loss log with sorted keys (byte-stable reruns)."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")

    def append(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def run_stage(loss_fn_for_step, params: dict, plan: StagePlan, log: LossLog,
              lr: float | None = None) -> Adam:
    """Run plan.steps steps; loss_fn_for_step(step) supplies each closure."""
    opt = Adam(lr=lr if lr is not None else plan.lr)
    for step in range(plan.steps):
        record = train_step(loss_fn_for_step(step), params, plan, opt)
        record["step"] = step
        record["seed"] = plan.seed
        log.append(record)
    return opt


# -- checkpoints --------------------------------------------------------------

def _tensor_path(root: str, name: str) -> str:
    return os.path.join(root, "tensors", name + ".bin")


def save_checkpoint(root: str, params: dict, lora: dict | None = None,
                    extra: dict | None = None):
    os.makedirs(os.path.join(root, "tensors"), exist_ok=True)
    names = {"params": sorted(params), "lora": sorted(lora or {})}
    for name, t in list(params.items()) + list((lora or {}).items()):
        with open(_tensor_path(root, name), "wb") as fh:
            fh.write(dump_tensor(t))
    manifest = {"tensors": names, "extra": extra or {}}
    with open(os.path.join(root, "checkpoint.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(root: str) -> tuple:
    """Returns (params, lora, extra)."""
    with open(os.path.join(root, "checkpoint.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    def read(name):
        with open(_tensor_path(root, name), "rb") as fh:
            return load_tensor(fh.read())

    params = {name: read(name) for name in manifest["tensors"]["params"]}
    lora = {name: read(name) for name in manifest["tensors"]["lora"]}
    for t in list(params.values()) + list(lora.values()):
        t.requires_grad = True
    return params, lora, manifest["extra"]
