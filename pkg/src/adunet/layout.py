"""Artifact paths inside a run directory."""

from __future__ import annotations

from pathlib import Path


def case_dir(root: Path, case_id: str) -> Path:
    return root / "data" / case_id


def recon_ckpt_path(root: Path, backend: str, modality: str) -> Path:
    return root / "checkpoints" / "recon" / f"{backend}_{modality}.ckpt"


def anomaly_path(root: Path, backend: str, case_id: str, modality: str, seg_backend: str) -> Path:
    if backend == seg_backend:
        return root / "anomaly" / case_id / f"{modality}.aduv"
    return root / "backends" / backend / "anomaly" / case_id / f"{modality}.aduv"


def recon_volume_path(root: Path, backend: str, case_id: str, modality: str) -> Path:
    return root / "backends" / backend / "recon" / case_id / f"{modality}.aduv"


def seg_ckpt_path(root: Path, variant: str, seed: int) -> Path:
    return root / "checkpoints" / "seg" / f"{variant}_seed{seed}.ckpt"


def prediction_path(root: Path, variant: str, seed: int, case_id: str) -> Path:
    return root / "predictions" / variant / f"seed{seed}" / f"{case_id}.aduv"
