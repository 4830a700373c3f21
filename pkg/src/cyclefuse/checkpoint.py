"""Versioned checkpoint directories with per-module segments.

Layout of one checkpoint:

    <dir>/
      manifest.json     format version, step, config, segment list
      denoiser.pt       {"format_version", "role", "config", "state"}
      fusion.pt         ...
      id.pt             identity conditioner
      id_loss.pt        frozen identity embedding used by the consistency loss
      exp_face.pt       expression module: face trunk
      exp_id.pt         expression module: id twin trunk
      exp_align.pt      expression module: channel-alignment conv (+ heads)
      lm.pt             landmark trunk + detector head
      eval_backbone.pt  metric embedding network
      trainer.pt        optimizer state, RNG state, step counter

Training runs store checkpoints under `{run}/step-{N}/`.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_segment(directory: Path, role: str, state: dict, config: dict | None = None) -> None:
    payload = {"format_version": FORMAT_VERSION, "role": role, "state": state}
    if config is not None:
        payload["config"] = config
    torch.save(payload, Path(directory) / f"{role}.pt")


def load_segment(directory: Path, role: str) -> dict:
    path = Path(directory) / f"{role}.pt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint segment missing: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {payload.get('format_version')} in {path}"
        )
    return payload


def has_segment(directory: Path, role: str) -> bool:
    return (Path(directory) / f"{role}.pt").exists()


def write_manifest(directory: Path, *, step: int, config: dict, segments: list[str]) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "config": config,
        "segments": sorted(segments),
    }
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    return manifest


def step_dir(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / f"step-{step}"


def latest_step_dir(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    candidates = sorted(
        (int(p.name.split("-", 1)[1]), p)
        for p in run_dir.glob("step-*")
        if p.is_dir() and p.name.split("-", 1)[1].isdigit()
    )
    if not candidates:
        raise FileNotFoundError(f"no step-N checkpoints under {run_dir}")
    return candidates[-1][1]
