"""Compare result files against golden values with tolerances.

A golden file is JSON of the form::

    {"schema_version": 1,
     "quantities": {"tau_ns": {"expected": 35.4, "tolerance": 2.0}, ...}}

Quantity keys are looked up in the result JSON files and manifest
summaries; nested keys use dots (``"measured.cooperativity_from_g_obs"``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .config import SCHEMA_VERSION
from .runner import sha256


class SchemaError(ValueError):
    """Golden and result files do not describe the same quantities."""


@dataclass(frozen=True)
class QuantityCheck:
    name: str
    observed: float
    expected: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.observed - self.expected) <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: observed {self.observed:.6g}, "
                f"expected {self.expected:.6g} +/- {self.tolerance:.3g}")


@dataclass(frozen=True)
class ComparisonReport:
    checks: tuple[QuantityCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[QuantityCheck]:
        return [c for c in self.checks if not c.passed]

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: "
                     f"{len(self.checks) - len(self.failures)}/{len(self.checks)} quantities")
        return "\n".join(lines)


def _flatten(obj, prefix="", out=None) -> dict[str, float]:
    out = {} if out is None else out
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(v, f"{prefix}{k}.", out)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        out[prefix[:-1]] = float(obj)
    return out


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None


def collect_quantities(result_files: Iterable[str | Path]) -> dict[str, float]:
    """Numeric leaves of result JSON files; manifests contribute their summary."""
    found: dict[str, float] = {}
    for path in result_files:
        path = Path(path)
        if path.suffix != ".json":
            continue
        doc = _read_json(path)
        if path.name.endswith(".manifest.json"):
            doc = doc.get("summary", {})
        for k, v in _flatten(doc).items():
            found.setdefault(k, v)
    return found


def load_golden(path: str | Path) -> dict[str, tuple[float, float]]:
    doc = _read_json(Path(path))
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    q = doc.get("quantities")
    if not isinstance(q, dict) or not q:
        raise SchemaError(f"{path}: expected a non-empty 'quantities' object")
    out = {}
    for name, spec in q.items():
        if name.startswith("_"):
            continue
        try:
            exp, tol = float(spec["expected"]), float(spec["tolerance"])
        except (TypeError, KeyError, ValueError):
            raise SchemaError(f"{path}: quantity {name!r} needs numeric "
                              f"'expected' and 'tolerance'") from None
        if not tol >= 0:
            raise SchemaError(f"{path}: quantity {name!r} has negative tolerance")
        out[name] = (exp, tol)
    return out


def compare(result_files: Iterable[str | Path], golden: str | Path | dict,
            tolerances: dict[str, float] | None = None) -> ComparisonReport:
    """Check every golden quantity against the results.

    ``tolerances`` overrides golden tolerances by name.

    Raises
    ------
    SchemaError
        If a golden quantity is missing from the results or not finite.
    """
    ref = load_golden(golden) if not isinstance(golden, dict) else golden
    observed = collect_quantities(result_files)
    missing = sorted(set(ref) - set(observed))
    if missing:
        raise SchemaError(f"missing quantities in results: {', '.join(missing)}")
    checks = []
    for name, (exp, tol) in ref.items():
        tol = (tolerances or {}).get(name, tol)
        val = observed[name]
        if not math.isfinite(val):
            raise SchemaError(f"quantity {name!r} is not finite in the results")
        checks.append(QuantityCheck(name, val, exp, tol))
    return ComparisonReport(tuple(checks))


def verify_manifest(manifest_path: str | Path) -> list[str]:
    """Outputs listed by a manifest that are missing or fail their checksum."""
    manifest_path = Path(manifest_path)
    doc = _read_json(manifest_path)
    problems = []
    for name, digest in doc.get("outputs", {}).items():
        f = manifest_path.parent / name
        if not f.exists():
            problems.append(f"missing output {name}")
        elif sha256(f) != digest:
            problems.append(f"checksum mismatch for {name}")
    return problems


def orphan_outputs(directory: str | Path) -> list[str]:
    """Result files in ``directory`` not listed by any manifest there."""
    directory = Path(directory)
    listed = set()
    for m in directory.glob("*.manifest.json"):
        listed.add(m.name)
        listed.update(_read_json(m).get("outputs", {}))
    return sorted(f.name for f in directory.iterdir()
                  if f.is_file() and not f.name.startswith(".") and f.name not in listed)


__all__ = ["SchemaError", "QuantityCheck", "ComparisonReport", "collect_quantities",
           "load_golden", "compare", "verify_manifest", "orphan_outputs"]
