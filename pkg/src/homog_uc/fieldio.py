"""On-disk formats for grid fields and corrector tables.

A field is a JSON header plus a sibling binary payload:

    header: {"kind": "coefficients" | "corrector", "d": int, "N": int,
             "order": int, "components": [[multi-index], ...],
             "dtype": "<f8", "payload": "<name>.bin"}
    payload: little-endian float64, row-major, components concatenated
             in header order.

A corrector table manifest is a JSON file listing the coefficient field
file, one corrector field file per order, and the homogenized tensors
inline (component list plus values, exact order as the field files).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import multiindex as mi
from .cell import CoefficientField, CorrectorTable
from .polyalg import SymTensor


class FieldFormatError(ValueError):
    """Malformed or inconsistent field file; the message names the file."""


def _write_payload(path: str, arrays) -> None:
    stacked = np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in arrays])
    stacked.astype("<f8").tofile(path)


def write_field(basepath: str, kind: str, d: int, N: int, order: int,
                components, arrays) -> str:
    """Write header + payload under basepath(.json/.bin); returns the
    header path."""
    payload_name = os.path.basename(basepath) + ".bin"
    header = {
        "kind": kind,
        "d": d,
        "N": N,
        "order": order,
        "components": [list(c) for c in components],
        "dtype": "<f8",
        "payload": payload_name,
    }
    header_path = basepath + ".json"
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_payload(os.path.join(os.path.dirname(basepath), payload_name), arrays)
    return header_path


def read_field(header_path: str):
    """(header dict, {component tuple: array}) with shape checks."""
    try:
        with open(header_path) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{header_path}: unreadable header ({exc})") from exc
    for key in ("kind", "d", "N", "order", "components", "dtype", "payload"):
        if key not in header:
            raise FieldFormatError(f"{header_path}: missing key '{key}'")
    if header["dtype"] != "<f8":
        raise FieldFormatError(f"{header_path}: unsupported dtype {header['dtype']}")
    d, N = int(header["d"]), int(header["N"])
    components = [tuple(int(e) for e in c) for c in header["components"]]
    payload_path = os.path.join(os.path.dirname(header_path), header["payload"])
    try:
        flat = np.fromfile(payload_path, dtype="<f8")
    except OSError as exc:
        raise FieldFormatError(f"{payload_path}: unreadable payload ({exc})") from exc
    per = N ** d
    if flat.size != per * len(components):
        raise FieldFormatError(
            f"{payload_path}: payload holds {flat.size} values, expected "
            f"{per * len(components)} ({len(components)} components of {per})")
    if not np.all(np.isfinite(flat)):
        raise FieldFormatError(f"{payload_path}: payload contains non-finite values")
    out = {}
    for k, comp in enumerate(components):
        out[comp] = flat[k * per:(k + 1) * per].reshape((N,) * d)
    return header, out


def coefficient_components(d: int):
    """Canonical component order of a symmetric matrix field: the
    order-2 multi-indices (diagonal entries at 2 e_i, off-diagonals at
    e_i + e_j)."""
    return list(mi.indices_of_order(d, 2))


def write_coefficients(basepath: str, field: CoefficientField) -> str:
    comps = coefficient_components(field.d)
    arrays = []
    for c in comps:
        ij = [k for k in range(field.d) for _ in range(c[k])]
        arrays.append(field.component(ij[0], ij[1]))
    return write_field(basepath, "coefficients", field.d, field.N, 2, comps, arrays)


def read_coefficients(header_path: str, lambda_max: float | None = None) -> CoefficientField:
    header, comps = read_field(header_path)
    if header["kind"] != "coefficients":
        raise FieldFormatError(f"{header_path}: kind is {header['kind']!r}, "
                               f"expected 'coefficients'")
    d, N = int(header["d"]), int(header["N"])
    values = np.zeros((N,) * d + (d, d))
    for c, arr in comps.items():
        ij = [k for k in range(d) for _ in range(c[k])]
        values[..., ij[0], ij[1]] = arr
        values[..., ij[1], ij[0]] = arr
    if lambda_max is None:
        lambda_max = float(np.linalg.eigvalsh(values.reshape(-1, d, d)).max())
    return CoefficientField(d, N, values, lambda_max=lambda_max)


def _tensor_to_json(T: SymTensor) -> dict:
    comps = list(mi.indices_of_order(T.dim, T.order))
    return {
        "order": T.order,
        "components": [list(c) for c in comps],
        "values": [float(T.get(c)) for c in comps],
    }


def _tensor_from_json(d: int, data: dict) -> SymTensor:
    comps = [tuple(int(e) for e in c) for c in data["components"]]
    return SymTensor(d, int(data["order"]),
                     {c: v for c, v in zip(comps, data["values"])})


def write_table(outdir: str, table: CorrectorTable, name: str = "correctors") -> str:
    """Write the coefficient field, all corrector fields, and the tensor
    manifest; returns the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    coeff_header = write_coefficients(os.path.join(outdir, "coefficients"), table.field)
    phi_entries = {}
    for m in range(1, table.m_max + 1):
        comps = list(mi.indices_of_order(table.d, m))
        arrays = [table.phi_component(m, c) for c in comps]
        path = write_field(os.path.join(outdir, f"phi_{m}"), "corrector",
                           table.d, table.N, m, comps, arrays)
        phi_entries[str(m)] = os.path.basename(path)
    manifest = {
        "kind": "corrector_table",
        "d": table.d,
        "N": table.N,
        "m_max": table.m_max,
        "solver_tol": table.solver_tol,
        "lambda_max": table.field.lambda_max,
        "coefficients": os.path.basename(coeff_header),
        "correctors": phi_entries,
        "homogenized_tensors": {str(m): _tensor_to_json(table.abar[m])
                                for m in range(table.m_max + 1)},
    }
    manifest_path = os.path.join(outdir, f"{name}.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def read_table(manifest_path: str) -> CorrectorTable:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    if manifest.get("kind") != "corrector_table":
        raise FieldFormatError(f"{manifest_path}: not a corrector table manifest")
    base = os.path.dirname(manifest_path)
    d = int(manifest["d"])
    N = int(manifest["N"])
    m_max = int(manifest["m_max"])
    field = read_coefficients(os.path.join(base, manifest["coefficients"]),
                              lambda_max=manifest.get("lambda_max"))
    phi = [{(0,) * d: np.ones((N,) * d)}]
    for m in range(1, m_max + 1):
        header_path = os.path.join(base, manifest["correctors"][str(m)])
        header, comps = read_field(header_path)
        if header["kind"] != "corrector" or int(header["order"]) != m:
            raise FieldFormatError(f"{header_path}: expected order-{m} corrector")
        if int(header["N"]) != N or int(header["d"]) != d:
            raise FieldFormatError(f"{header_path}: grid mismatch with manifest")
        phi.append(comps)
    abar = [_tensor_from_json(d, manifest["homogenized_tensors"][str(m)])
            for m in range(m_max + 1)]
    return CorrectorTable(field, m_max, phi, abar,
                          solver_tol=float(manifest["solver_tol"]))


def validate_table_files(manifest_path: str) -> dict:
    """Structural validation used by the verification command: formats,
    shapes, finiteness, coefficient bounds, corrector mean-zero."""
    problems = []
    try:
        table = read_table(manifest_path)
    except FieldFormatError as exc:
        return {"ok": False, "problems": [str(exc)]}
    rep = table.field.validate()
    if not rep["ok"]:
        problems.append(f"coefficient field fails ellipticity bounds: {rep}")
    for m in range(1, table.m_max + 1):
        for c, arr in table.phi[m].items():
            mean = float(np.mean(arr))
            scale = max(float(np.max(np.abs(arr))), 1.0)
            if abs(mean) > 1e-10 * scale:
                problems.append(f"corrector order {m} component {c} has mean "
                                f"{mean:.3e}")
    return {"ok": not problems, "problems": problems}
