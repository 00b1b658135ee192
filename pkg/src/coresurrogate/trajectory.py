"""Time-stamped state sequences and their JSON-lines file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .plant import PlantConstants, PowerProfile, slices

PROVENANCES = ("reference", "pinn-hybrid", "gbt-rollout")


def constants_hash(c: PlantConstants) -> str:
    return hashlib.sha256(c.to_kv().encode()).hexdigest()[:16]


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    profile: PowerProfile
    provenance: str = "reference"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.shape[0]:
            raise DomainError(f"times {self.times.shape} and states {self.states.shape} do not align")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise DomainError("trajectory times must be strictly increasing")
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.times.size

    @property
    def n_z(self) -> int:
        return (self.states.shape[1] - 2) // 3

    @property
    def p_turb(self) -> np.ndarray:
        return self.profile(self.times)

    @property
    def flux(self) -> np.ndarray:
        return self.states[:, : self.n_z]

    def check_invariants(self) -> None:
        nz = self.n_z
        if not np.all(np.isfinite(self.states)):
            raise DomainError("trajectory contains non-finite states")
        if np.any(self.states[:, : 3 * nz] < 0):
            raise DomainError("trajectory contains negative flux or concentration")
        xb = self.states[:, 3 * nz + 1]
        if np.any((xb < 0) | (xb > 1)):
            raise DomainError("trajectory rod position leaves [0, 1]")

    # -- JSON-lines -------------------------------------------------------

    def to_jsonl(self, path: str | Path, spec: dict | None = None,
                 c: PlantConstants | None = None) -> None:
        sn, si, sx, it, ib = slices(self.n_z)
        meta = dict(self.meta)
        meta.update(provenance=self.provenance, profile=self.profile.to_json())
        if spec is not None:
            meta["spec"] = spec
        if c is not None:
            meta["constants_hash"] = constants_hash(c)
        p = self.p_turb
        # repr of a Python float is the shortest string that round-trips exactly
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": meta}) + "\n")
            for k in range(len(self)):
                x = self.states[k]
                fh.write(json.dumps({
                    "t": float(self.times[k]),
                    "p_turb": float(p[k]),
                    "n": x[sn].tolist(),
                    "iodine": x[si].tolist(),
                    "xenon": x[sx].tolist(),
                    "t_cl": float(x[it]),
                    "x_bank": float(x[ib]),
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Trajectory":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if "meta" not in header:
                raise DomainError(f"{path}: first line must carry the meta header")
            meta = header["meta"]
            times, rows = [], []
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                times.append(rec["t"])
                rows.append(rec["n"] + rec["iodine"] + rec["xenon"] + [rec["t_cl"], rec["x_bank"]])
        profile = PowerProfile.from_json(meta.pop("profile"))
        provenance = meta.pop("provenance")
        return cls(np.array(times), np.array(rows), profile, provenance, meta)
