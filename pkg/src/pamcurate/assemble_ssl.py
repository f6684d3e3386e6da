"""Final dataset assembly plus the teacher-weight EMA schedule utility."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core_model import CurationManifest, ManifestEntry, WINDOW_S
from .errors import ValidationError


def assemble(ais_entries, hkmeans_entries) -> CurationManifest:
    """Deduplicating union of the two curated entry sets.

    Keyed by window_id; when a window was selected by both routes, the AIS
    entry wins and inherits the cluster path from its counterpart, so no
    provenance is lost.  Duplicates *within* one input are an error: they
    would silently skew the balance the pipeline exists to create.
    """
    merged: dict[int, ManifestEntry] = {}
    for e in hkmeans_entries:
        if e.window_id in merged:
            raise ValidationError(f"duplicate window_id {e.window_id} within the cluster-curated entries")
        merged[e.window_id] = e
    seen_ais: set[int] = set()
    for e in ais_entries:
        if e.window_id in seen_ais:
            raise ValidationError(f"duplicate window_id {e.window_id} within the AIS-curated entries")
        seen_ais.add(e.window_id)
        other = merged.get(e.window_id)
        if other is None:
            merged[e.window_id] = e
            continue
        if e.source == other.source:
            raise ValidationError(f"window_id {e.window_id} appears in both inputs with source {e.source!r}")
        winner, loser = (e, other) if e.source == "ais" else (other, e)
        if winner.cluster_path is None and loser.cluster_path is not None:
            winner = replace(winner, cluster_path=loser.cluster_path)
        merged[e.window_id] = winner
    return CurationManifest(entries=tuple(merged.values()))


def summarize(manifest: CurationManifest) -> dict:
    """Per-source counts, audio hours, and per-hydrophone breakdown."""
    by_source = manifest.count_by_source()
    per_hydrophone: dict[str, int] = {}
    for e in manifest.entries:
        per_hydrophone[e.hydrophone_id] = per_hydrophone.get(e.hydrophone_id, 0) + 1
    total = len(manifest)
    return {
        "total_entries": total,
        "ais_entries": by_source["ais"],
        "hkmeans_entries": by_source["hkmeans"],
        "total_seconds": total * WINDOW_S,
        "total_hours": total * WINDOW_S / 3600.0,
        "per_hydrophone": dict(sorted(per_hydrophone.items())),
    }


def format_summary(summary: dict) -> str:
    lines = [
        f"entries: {summary['total_entries']}",
        f"  ais: {summary['ais_entries']}",
        f"  hkmeans: {summary['hkmeans_entries']}",
        f"audio: {summary['total_seconds']} s ({summary['total_hours']:.2f} h)",
        "per hydrophone:",
    ]
    for hid, count in summary["per_hydrophone"].items():
        lines.append(f"  {hid}: {count}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# EMA teacher update
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmaConfig:
    """Teacher-tracking momentum ramp: tau climbs linearly over the first
    ``ramp_updates`` steps, then stays at ``tau_end``."""

    tau_start: float = 0.999
    tau_end: float = 0.9999
    ramp_updates: int = 20

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValidationError(f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")
        if self.ramp_updates < 1:
            raise ValidationError("ramp_updates must be >= 1")


def tau_at(step: int, config: EmaConfig = EmaConfig()) -> float:
    """Momentum at an update step; exact at both endpoints."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    if step >= config.ramp_updates:
        return config.tau_end
    return config.tau_start + (config.tau_end - config.tau_start) * (step / config.ramp_updates)


def ema_update(teacher, student, tau: float) -> np.ndarray:
    """Elementwise ``tau * teacher + (1 - tau) * student``."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ValidationError(f"shape mismatch: teacher {t.shape} vs student {s.shape}")
    return tau * t + (1.0 - tau) * s
