"""File formats: binary containers, curve CSVs, prior and result JSON.

Datasets and KL models share one container layout:

    bytes 0-7    magic b"RIVESTBF"
    bytes 8-11   format version, uint32 little-endian
    bytes 12-19  header length in bytes, uint64 little-endian
    ...          UTF-8 JSON header
    ...          the arrays named in header["arrays"], in order, as
                 little-endian float64, row-major

The header records the array names and shapes plus all provenance needed
to regenerate the artifact (grid, family, formulation, seed, prior).
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from rivest.dataset import LogNormalPrior, SyntheticDataset
from rivest.embedding import MeasuredCurve
from rivest.klmodel import KLModel
from rivest.solver import Formulation, TimeGrid

MAGIC = b"RIVESTBF"
FORMAT_VERSION = 1


class FileFormatError(RuntimeError):
    """Raised for unreadable or mismatched artifact files."""


def write_container(path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["kind"] = kind
    header["arrays"] = [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            arrays[spec["name"]] = data.reshape(shape).copy()
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise FileFormatError(f"{path}: expected kind {expected_kind!r}, found {header.get('kind')!r}")
    return header, arrays


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _grid_to_dict(grid: TimeGrid) -> dict:
    return {"start": grid.start, "step": grid.step, "count": grid.count}


def _grid_from_dict(record: dict) -> TimeGrid:
    return TimeGrid(step=float(record["step"]), count=int(record["count"]), start=float(record.get("start", 0.0)))


def save_dataset(dataset: SyntheticDataset, path) -> None:
    header = {
        "grid": _grid_to_dict(dataset.grid),
        "family": dataset.family,
        "formulation": int(dataset.formulation),
        "seed": dataset.seed,
        "prior": dataset.prior.to_dict(),
        "n_synth": dataset.n_samples,
        "mass": dataset.mass,
    }
    write_container(path, "dataset", header, {"samples": dataset.samples, "curves": dataset.curves})


def load_dataset(path) -> SyntheticDataset:
    header, arrays = read_container(path, expected_kind="dataset")
    return SyntheticDataset(
        grid=_grid_from_dict(header["grid"]),
        family=header["family"],
        formulation=Formulation(header["formulation"]),
        seed=int(header["seed"]),
        prior=LogNormalPrior.from_dict(header["prior"]),
        samples=arrays["samples"],
        curves=arrays["curves"],
        mass=float(header.get("mass", 1.0)),
    )


def save_kl_model(model: KLModel, path) -> None:
    header = {
        "grid": _grid_to_dict(model.grid),
        "n_modes": model.n_modes,
        "dataset_hash": model.dataset_hash,
    }
    arrays = {
        "mean": model.mean,
        "eigenvalues": model.eigenvalues,
        "eigenfunctions": model.eigenfunctions,
        "spectrum": model.spectrum,
    }
    write_container(path, "kl_model", header, arrays)


def load_kl_model(path) -> KLModel:
    header, arrays = read_container(path, expected_kind="kl_model")
    return KLModel(
        grid=_grid_from_dict(header["grid"]),
        mean=arrays["mean"],
        eigenvalues=arrays["eigenvalues"],
        eigenfunctions=arrays["eigenfunctions"],
        spectrum=arrays["spectrum"],
        dataset_hash=header.get("dataset_hash"),
    )


def save_prior(prior: LogNormalPrior, path) -> None:
    Path(path).write_text(json.dumps(prior.to_dict(), indent=2, sort_keys=True))


def load_prior(path) -> LogNormalPrior:
    return LogNormalPrior.from_dict(json.loads(Path(path).read_text()))


def read_curve_csv(path, meta_path=None) -> MeasuredCurve:
    """Read a measured curve from `time_s,concentration` CSV plus sidecar JSON.

    The sidecar must provide `reach_length_m`; any other keys are kept as
    metadata. When `meta_path` is omitted, `<curve>.json` next to the CSV
    is used.
    """
    path = Path(path)
    if meta_path is None:
        meta_path = path.with_suffix(".json")
    meta = json.loads(Path(meta_path).read_text())
    if "reach_length_m" not in meta:
        raise FileFormatError(f"{meta_path}: missing reach_length_m")
    times, concentrations = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "time_s" not in reader.fieldnames or "concentration" not in reader.fieldnames:
            raise FileFormatError(f"{path}: expected header time_s,concentration")
        for row in reader:
            times.append(float(row["time_s"]))
            concentrations.append(float(row["concentration"]))
    reach_length = float(meta.pop("reach_length_m"))
    return MeasuredCurve(
        times=np.asarray(times),
        concentrations=np.asarray(concentrations),
        reach_length=reach_length,
        metadata=meta,
    )


def write_curve_csv(path, times: np.ndarray, concentrations: np.ndarray, digits: int = 9) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "concentration"])
        for t, c in zip(times, concentrations):
            writer.writerow([f"{t:.{digits}g}", f"{c:.{digits}g}"])


def write_result_json(result, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
