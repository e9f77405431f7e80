"""Report serialization: JSON envelopes, CSV field dumps, run manifests.

The canonical mode exists so that two runs with the same config and seed
produce byte-identical report files.  It strips everything wall-clock
dependent (timestamps, runtimes) and serializes floats through repr,
which round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import os
from typing import Optional

import numpy as np

from . import __version__
from .runner import RunResult
from .simulate import ensemble_to_binary

__all__ = [
    "canonical_json_bytes", "report_payload", "write_report",
    "write_field_csv", "write_ensemble_summary_csv", "write_density_csv",
    "write_manifest", "export_run",
]

_VOLATILE_KEYS = frozenset({"runtime_s", "generated_at", "total_runtime_s"})


def _strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k not in _VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def canonical_json_bytes(payload: dict) -> bytes:
    """Sorted keys, two-space indent, repr floats, LF endings, no volatile keys."""
    cleaned = _strip_volatile(payload)
    text = json.dumps(cleaned, sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")


def report_payload(result: RunResult, canonical: bool = False) -> dict:
    cfg = result.scenario
    payload = {
        "package": "nelsonlab",
        "version": __version__,
        "scenario": cfg.name,
        "description": cfg.description,
        "seed": cfg.seed,
        "config_sha256": cfg.content_hash(),
        "check_seeds": {k: int(v) for k, v in result.check_seeds.items()},
        "checks": [rep.to_dict() for rep in result.reports],
        "expectations": result.expectations,
        "summary": {
            "as_expected": result.as_expected,
            "inconclusive": result.inconclusive,
            "exit_code": result.exit_code,
        },
    }
    if result.error is not None:
        payload["error"] = result.error
    if not canonical:
        payload["total_runtime_s"] = float(result.runtime_s)
        payload["generated_at"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat(timespec="seconds")
    return payload


def write_report(result: RunResult, path: str, canonical: bool = False) -> bytes:
    payload = report_payload(result, canonical=canonical)
    if canonical:
        blob = canonical_json_bytes(payload)
    else:
        blob = (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def _fmt(x) -> str:
    """Full-precision text for one cell; repr round-trips floats exactly."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_field_csv(field, path: str) -> None:
    """Dump a DerivativeField: coordinates, components, mask, ess, stderr."""
    grid = field.grid
    pts = grid.points().reshape(-1, grid.dim)
    m = field.values.shape[-1]
    vals = field.values.reshape(-1, m)
    mask = field.mask.reshape(-1)
    header = [f"x{i}" for i in range(grid.dim)]
    header += [f"v{j}" for j in range(m)]
    header.append("valid")
    ess = field.ess.reshape(-1) if field.ess is not None else None
    se = field.stderr.reshape(-1, m) if field.stderr is not None else None
    imag = field.imag.reshape(-1, m) if field.imag is not None else None
    if imag is not None:
        header += [f"v{j}_imag" for j in range(m)]
    if ess is not None:
        header.append("ess")
    if se is not None:
        header += [f"se{j}" for j in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(pts.shape[0]):
            row = [_fmt(c) for c in pts[i]]
            row += [_fmt(v) for v in vals[i]]
            row.append(_fmt(bool(mask[i])))
            if imag is not None:
                row += [_fmt(v) for v in imag[i]]
            if ess is not None:
                row.append(_fmt(float(ess[i])))
            if se is not None:
                row += [_fmt(v) for v in se[i]]
            w.writerow(row)


def write_density_csv(dens, path: str) -> None:
    pts = dens.grid.points().reshape(-1, dens.grid.dim)
    vals = dens.values.reshape(-1)
    bulk = dens.bulk_mask().reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(dens.grid.dim)] + ["p", "bulk"])
        for i in range(pts.shape[0]):
            w.writerow([_fmt(c) for c in pts[i]] + [_fmt(float(vals[i])), _fmt(bool(bulk[i]))])


def write_ensemble_summary_csv(ensemble, path: str, every: int = 1) -> None:
    """Per-slice mean and second-moment summary of a path ensemble."""
    d = ensemble.dim
    times = ensemble.times[::every]
    states = ensemble.states[:, ::every, :]
    header = ["t"] + [f"mean{i}" for i in range(d)]
    header += [f"m2_{i}{j}" for i in range(d) for j in range(i, d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, t in enumerate(times):
            x = states[:, k, :]
            row = [_fmt(float(t))] + [_fmt(float(v)) for v in x.mean(axis=0)]
            for i in range(d):
                for j in range(i, d):
                    row.append(_fmt(float(np.mean(x[:, i] * x[:, j]))))
            w.writerow(row)


def write_manifest(result: RunResult, out_dir: str, files: list, canonical: bool,
                   threads: int, path: str) -> None:
    cfg = result.scenario
    entries = []
    for name in sorted(files):
        fp = os.path.join(out_dir, name)
        h = hashlib.sha256()
        with open(fp, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        entries.append({"name": name, "sha256": h.hexdigest(),
                        "bytes": os.path.getsize(fp)})
    manifest = {
        "package": "nelsonlab",
        "version": __version__,
        "scenario": cfg.name,
        "seed": cfg.seed,
        "config_sha256": cfg.content_hash(),
        "check_seeds": {k: int(v) for k, v in result.check_seeds.items()},
        "canonical": bool(canonical),
        "threads": int(threads),
        "files": entries,
    }
    if not canonical:
        manifest["generated_at"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat(timespec="seconds")
    with open(path, "wb") as fh:
        fh.write(canonical_json_bytes(manifest) if canonical
                 else (json.dumps(manifest, indent=2) + "\n").encode())


def export_run(result: RunResult, out_dir: str, canonical: bool = False,
               figures: bool = True, threads: int = 1,
               ensemble_binary: bool = False) -> list:
    """Write the full artifact set for a run; returns the file names written."""
    os.makedirs(out_dir, exist_ok=True)
    files = []

    write_report(result, os.path.join(out_dir, "report.json"), canonical=canonical)
    files.append("report.json")

    for rep in result.reports:
        for field_name, field in rep.fields.items():
            if not hasattr(field, "grid"):
                continue
            name = f"{rep.name}_{field_name}.csv"
            write_field_csv(field, os.path.join(out_dir, name))
            files.append(name)

    if result.density is not None:
        write_density_csv(result.density, os.path.join(out_dir, "density.csv"))
        files.append("density.csv")

    if result.ensemble is not None:
        every = max(1, result.ensemble.n_steps // 64)
        write_ensemble_summary_csv(result.ensemble,
                                   os.path.join(out_dir, "ensemble_summary.csv"),
                                   every=every)
        files.append("ensemble_summary.csv")
        if ensemble_binary:
            ensemble_to_binary(result.ensemble, os.path.join(out_dir, "ensemble.nlb"))
            files.append("ensemble.nlb")

    if figures:
        from . import figures as figures_mod
        files.extend(figures_mod.render_run(result, out_dir))

    write_manifest(result, out_dir, files, canonical, threads,
                   os.path.join(out_dir, "manifest.json"))
    files.append("manifest.json")
    return files
