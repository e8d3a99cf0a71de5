"""
Artifact Repository - Output Files

Every file the toolkit emits goes through here:

    rows CSV        fixed column order (CSV_COLUMNS), floats written with repr()
    JSON            pydantic models dumped by alias (so "schema" appears as such)
    points CSV      x0,...,x{d-1} header, one point per line
    kernel text     CSR text: "n,k" then the neighbour indices of each row
    moments CSV     (i, m, flattened tensor) per point and order
    stationary CSV  (index, probability)
    plan CSV        (i, j, mass) triplets
    trace CSV       (t, I) of a Fisher-information trace, plus a ratio column per k
    checksums       sha256 of a file's bytes

Inputs (sweep configs, density models) are read here as well.
"""

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
from pydantic import BaseModel

from app.exceptions import InvalidParameterError
from app.models.kernel import MomentField, SparseKernel
from app.models.semigroup import FisherTrace, GradientBoundReport
from app.models.stationary import StationaryDistribution
from app.models.torus import DensityModel
from app.models.transport import TransportPlan
from app.schemas.density import DensityModelSchema
from app.schemas.experiment import CSV_COLUMNS, ResultRow, SweepConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ArtifactRepository:
    """File-system reads and writes of toolkit artifacts."""

    # =========================================================================
    # INPUTS
    # =========================================================================

    def load_density(self, path: PathLike) -> DensityModel:
        return DensityModelSchema.model_validate_json(Path(path).read_text(encoding="utf-8")).to_model()

    def load_sweep_config(self, path: PathLike) -> SweepConfig:
        """
        Reads a SweepConfig; a density_path is resolved relative to the config file
        and inlined as the density.
        """
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        density_path = raw.get("density_path")
        if density_path and raw.get("density") is None:
            resolved = Path(density_path)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            raw["density"] = json.loads(resolved.read_text(encoding="utf-8"))
        return SweepConfig.model_validate(raw)

    # =========================================================================
    # ROWS
    # =========================================================================

    def write_rows_csv(self, path: PathLike, rows: Iterable[ResultRow]) -> Path:
        path = self._prepare(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([self._cell(getattr(row, name)) for name in CSV_COLUMNS])
        return path

    def read_rows_csv(self, path: PathLike) -> List[ResultRow]:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            return [
                ResultRow.model_validate({k: (v if v != "" else None) for k, v in record.items()})
                for record in reader
            ]

    def _cell(self, value) -> str:
        if value is None:
            return ""
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        if hasattr(value, "value"):
            return str(value.value)
        return str(value)

    # =========================================================================
    # JSON / ARRAYS
    # =========================================================================

    def write_json(self, path: PathLike, payload: Union[BaseModel, dict]) -> Path:
        path = self._prepare(path)
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(by_alias=True, indent=2)
        else:
            text = json.dumps(payload, indent=2, sort_keys=True)
        path.write_text(text + "\n", encoding="utf-8")
        return path

    def write_points(self, path: PathLike, points: np.ndarray) -> Path:
        """One point per line under an x0,...,x{d-1} header."""
        path = self._prepare(path)
        points = np.atleast_2d(points)
        header = ",".join(f"x{axis}" for axis in range(points.shape[1]))
        np.savetxt(path, points, delimiter=",", fmt="%.17g", header=header, comments="")
        return path

    def read_points(self, path: PathLike) -> np.ndarray:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)

    def write_kernel(self, path: PathLike, kernel: SparseKernel) -> Path:
        """
        CSR text: a first line "n,k" (k the row denominator), then one line per
        row listing its neighbour indices. An index with count c appears c times,
        so every row line has exactly k entries.
        """
        path = self._prepare(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow([kernel.n, kernel.denominator])
            for i in range(kernel.n):
                start, stop = kernel.indptr[i], kernel.indptr[i + 1]
                writer.writerow(np.repeat(kernel.indices[start:stop], kernel.counts[start:stop]).tolist())
        return path

    def read_kernel(self, path: PathLike) -> SparseKernel:
        """
        Inverse of write_kernel. Rows of k distinct indices come back as a kNN
        kernel in file order; include_self is inferred from the self loops.
        Radii are not stored.
        """
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            try:
                n, k = (int(value) for value in next(reader))
            except (StopIteration, ValueError) as exc:
                raise InvalidParameterError(f"{path}: kernel file needs an 'n,k' first line") from exc
            rows = [[int(value) for value in record] for record in reader if record]
        if len(rows) != n:
            raise InvalidParameterError(f"{path}: header says {n} rows, found {len(rows)}")
        if all(len(row) == k and len(set(row)) == k for row in rows):
            kernel = SparseKernel.from_neighbors(np.array(rows, dtype=np.int64).reshape(n, k))
        else:
            kernel = SparseKernel.from_rows([Counter(row) for row in rows], denominator=k)
        include_self = bool(np.all(kernel.has_self_loop()))
        logger.debug(f"Read kernel n={n}, k={k} from {path}")
        return replace(kernel, include_self=include_self)

    def write_moments_csv(self, path: PathLike, field: MomentField) -> Path:
        """
        One line per (i, m): the row-major flattened tensor M_m(X_i). Lines of
        orders below m_max leave the trailing columns empty.
        """
        path = self._prepare(path)
        width = field.dim**field.m_max
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["i", "m"] + [f"c{p}" for p in range(width)])
            for i in range(field.n):
                for m in range(1, field.m_max + 1):
                    entries = [repr(float(v)) for v in field.moments[m][i]]
                    writer.writerow([i, m] + entries + [""] * (width - len(entries)))
        return path

    def read_moments_csv(self, path: PathLike, dim: int) -> Dict[int, np.ndarray]:
        """{m: (n, d**m) array} from a moments CSV."""
        collected: Dict[int, Dict[int, List[float]]] = {}
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            next(reader)
            for record in reader:
                i, m = int(record[0]), int(record[1])
                collected.setdefault(m, {})[i] = [float(v) for v in record[2 : 2 + dim**m]]
        return {m: np.array([rows[i] for i in sorted(rows)]) for m, rows in sorted(collected.items())}

    def write_stationary_csv(self, path: PathLike, pi: StationaryDistribution) -> Path:
        path = self._prepare(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["index", "probability"])
            for i, p in enumerate(pi.probabilities):
                writer.writerow([i, repr(float(p))])
        return path

    def write_plan_csv(self, path: PathLike, plan: TransportPlan) -> Path:
        path = self._prepare(path)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["i", "j", "mass"])
            for i, j, mass in plan.triplets():
                writer.writerow([i, j, repr(float(mass))])
        return path

    def write_trace_csv(self, path: PathLike, trace: FisherTrace, gradient: Optional[GradientBoundReport] = None) -> Path:
        """
        (t, I) rows; with a gradient report, one ratio_k<k> column per order k.
        Times the report does not cover (t = 0) leave the ratio cells empty.
        """
        path = self._prepare(path)
        orders = sorted({entry.k for entry in gradient.entries}) if gradient is not None else []
        ratios = {(entry.k, entry.t): entry.ratio for entry in gradient.entries} if gradient is not None else {}
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["t", "fisher_information"] + [f"ratio_k{k}" for k in orders])
            for t, value in trace.rows():
                cells = [repr(ratios[(k, t)]) if (k, t) in ratios else "" for k in orders]
                writer.writerow([repr(float(t)), repr(float(value))] + cells)
        return path

    # =========================================================================
    # CHECKSUMS
    # =========================================================================

    def checksum(self, path: PathLike) -> str:
        digest = hashlib.sha256()
        with Path(path).open("rb") as handle:
            for block in iter(lambda: handle.read(1 << 20), b""):
                digest.update(block)
        return digest.hexdigest()

    def _prepare(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


# Singleton instance
artifact_repository = ArtifactRepository()
