"""File formats: YAML scenes, spot and point-cloud CSV, PLY, path and metrics JSON.

Floats are written with ``repr`` so every file round-trips exactly and two
runs with the same inputs produce identical bytes.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .recon_sb import LABELS, ReconstructedPoint
from .scene import SPEED_OF_LIGHT, DetectorGrid, Exposure, Facet, LidarConfig, Material, PathRecord, Scene, Spot, beam_grid

SCENE_FORMAT_VERSION = 1
SPOTS_HEADER = ["beam_index", "spot_index", "dx", "dy", "dz", "tof", "energy", "tof_sigma", "sources"]
POINT_HEADER = ["x", "y", "z", "nx", "ny", "nz", "label", "eq_tag", "beam_index"]
CLASS_HEADER = ["beam_index", "spot_index", "kind", "bounce_class"]


class SceneFormatError(ValueError):
    """Malformed scene file; the message names the file, line and field."""

    def __init__(self, path, line: Optional[int], field: str, msg: str):
        self.path, self.line, self.field = str(path), line, field
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {field}: {msg}" if field else f"{where}: {msg}")


class RunIdMismatch(ValueError):
    pass


# --- YAML with line numbers -----------------------------------------------------


class _Map(dict):
    line = 0
    key_lines: dict = {}


class _Seq(list):
    line = 0
    item_lines: list = []


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    m = _Map()
    m.line = node.start_mark.line + 1
    m.key_lines = {}
    for k, v in node.value:
        key = loader.construct_object(k, deep=True)
        m[key] = loader.construct_object(v, deep=True)
        m.key_lines[key] = v.start_mark.line + 1
    return m


def _construct_seq(loader, node):
    s = _Seq(loader.construct_object(v, deep=True) for v in node.value)
    s.line = node.start_mark.line + 1
    s.item_lines = [v.start_mark.line + 1 for v in node.value]
    return s


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


class _Reader:
    """Typed field access that reports file, line and dotted field path on failure."""

    def __init__(self, path):
        self.path = path

    def fail(self, line, field, msg):
        raise SceneFormatError(self.path, line, field, msg)

    def line_of(self, parent, key):
        if isinstance(parent, _Map):
            return parent.key_lines.get(key, parent.line)
        if isinstance(parent, _Seq) and isinstance(key, int) and key < len(parent.item_lines):
            return parent.item_lines[key]
        return getattr(parent, "line", None)

    def get(self, parent, key, field, required=True, default=None):
        if isinstance(parent, list) and isinstance(key, int):
            return parent[key]
        if not isinstance(parent, dict):
            self.fail(getattr(parent, "line", None), field.rsplit(".", 1)[0], "expected a mapping")
        if key not in parent:
            if required:
                self.fail(getattr(parent, "line", None), field, "missing required field")
            return default
        return parent[key]

    def number(self, parent, key, field, required=True, default=None):
        v = self.get(parent, key, field, required, default)
        if v is None:
            return default
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(self.line_of(parent, key), field, f"expected a number, got {v!r}")
        if not math.isfinite(v):
            self.fail(self.line_of(parent, key), field, "must be finite")
        return float(v)

    def integer(self, parent, key, field, required=True, default=None):
        v = self.get(parent, key, field, required, default)
        if v is None:
            return default
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            self.fail(self.line_of(parent, key), field, f"expected a positive integer, got {v!r}")
        return int(v)

    def vector(self, parent, key, field, n=3, required=True):
        v = self.get(parent, key, field, required)
        if v is None:
            return None
        line = self.line_of(parent, key)
        if not isinstance(v, list) or len(v) != n:
            self.fail(line, field, f"expected a list of {n} numbers")
        for x in v:
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                self.fail(line, field, f"expected a list of {n} numbers, got {x!r}")
        return np.array(v, dtype=float)

    def vectors(self, parent, key, field, min_len=0):
        v = self.get(parent, key, field)
        line = self.line_of(parent, key)
        if not isinstance(v, list) or len(v) < min_len:
            self.fail(line, field, f"expected a list of at least {min_len} 3-vectors")
        return np.array([self.vector(v, i, f"{field}[{i}]") for i in range(len(v))], dtype=float).reshape(-1, 3)


def _angles(r: _Reader, m, base: str, field: str):
    """``<base>_deg`` or ``<base>_rad`` as a radian pair."""
    if f"{base}_rad" in m:
        return tuple(r.vector(m, f"{base}_rad", f"{field}.{base}_rad", 2))
    deg = r.vector(m, f"{base}_deg", f"{field}.{base}_deg", 2)
    return tuple(np.radians(deg))


def _read_grid(r: _Reader, m, field: str) -> DetectorGrid:
    h = _angles(r, m, "h", field)
    v = _angles(r, m, "v", field)
    n_h = r.integer(m, "n_h", f"{field}.n_h")
    n_v = r.integer(m, "n_v", f"{field}.n_v")
    if not (h[0] < h[1] and v[0] < v[1]):
        r.fail(m.line, field, "angle ranges must be increasing")
    return DetectorGrid(h[0], h[1], v[0], v[1], n_h, n_v)


def _read_material(r: _Reader, m, field: str) -> Material:
    kind = r.get(m, "kind", f"{field}.kind")
    if kind not in ("diffuse", "specular", "transparent"):
        r.fail(r.line_of(m, "kind"), f"{field}.kind", f"unknown material kind {kind!r}")
    kw = {}
    for name in ("albedo", "reflectance", "transmittance"):
        val = r.number(m, name, f"{field}.{name}", required=False)
        if val is not None:
            kw[name] = val
    if kind == "diffuse" and "albedo" not in kw:
        r.fail(m.line, f"{field}.albedo", "missing required field")
    if kind == "specular":
        kw.setdefault("reflectance", 1.0)
    if kind == "transparent" and not ("reflectance" in kw and "transmittance" in kw):
        r.fail(m.line, field, "transparent materials need reflectance and transmittance")
    try:
        return Material(kind, **kw)
    except ValueError as exc:
        r.fail(m.line, field, str(exc))


def parse_scene(text: str, path="<string>") -> Scene:
    r = _Reader(path)
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise SceneFormatError(path, mark.line + 1 if mark else None, "", f"YAML syntax error: {exc.problem}") from exc
    if doc is None:
        r.fail(None, "", "empty scene file")
    if not isinstance(doc, dict):
        r.fail(getattr(doc, "line", 1), "", "top level must be a mapping")
    version = doc.get("format_version", SCENE_FORMAT_VERSION)
    if version != SCENE_FORMAT_VERSION:
        r.fail(r.line_of(doc, "format_version"), "format_version", f"unsupported version {version!r}")

    lid = r.get(doc, "lidar", "lidar")
    L = r.vector(lid, "L", "lidar.L")
    C = r.vector(lid, "C", "lidar.C")
    c = r.number(lid, "c", "lidar.c", required=False, default=SPEED_OF_LIGHT)
    if c <= 0:
        r.fail(r.line_of(lid, "c"), "lidar.c", "must be positive")
    det = r.get(lid, "detector", "lidar.detector", required=False)
    if det is None:
        grid = DetectorGrid(-math.radians(30), math.radians(30), -math.radians(30), math.radians(30), 200, 200)
    else:
        grid = _read_grid(r, det, "lidar.detector")
    if "beams" in lid and "beam_grid" in lid:
        r.fail(lid.line, "lidar", "give either beams or beam_grid, not both")
    if "beam_grid" in lid:
        bg = r.get(lid, "beam_grid", "lidar.beam_grid")
        g = _read_grid(r, bg, "lidar.beam_grid") if isinstance(bg, dict) else r.fail(lid.line, "lidar.beam_grid", "expected a mapping")
        beams = beam_grid(L, (g.h_min, g.h_max), (g.v_min, g.v_max), g.n_h, g.n_v)
    elif "beams" in lid:
        beams = r.vectors(lid, "beams", "lidar.beams")
        norms = np.linalg.norm(beams, axis=1)
        for i, nrm in enumerate(norms):
            if nrm < 1e-12:
                r.fail(lid["beams"].item_lines[i], f"lidar.beams[{i}]", "zero-length beam direction")
    else:
        beams = np.zeros((0, 3))
    lidar = LidarConfig(L=L, C=C, beams=beams, grid=grid, c=c)

    facets = []
    raw = r.get(doc, "facets", "facets", required=False, default=[])
    if not isinstance(raw, list):
        r.fail(r.line_of(doc, "facets"), "facets", "expected a list")
    for i, fm in enumerate(raw):
        field = f"facets[{i}]"
        if not isinstance(fm, dict):
            r.fail(r.line_of(raw, i), field, "expected a mapping")
        fid = r.get(fm, "id", f"{field}.id")
        verts = r.vectors(fm, "vertices", f"{field}.vertices", 3)
        mat = _read_material(r, r.get(fm, "material", f"{field}.material"), f"{field}.material")
        obj = fm.get("object")
        try:
            facets.append(Facet(verts, mat, str(fid), None if obj is None else str(obj)))
        except ValueError as exc:
            r.fail(fm.line, field, str(exc))

    noise = r.get(doc, "noise", "noise", required=False, default={})
    if not isinstance(noise, dict):
        r.fail(r.line_of(doc, "noise"), "noise", "expected a mapping")
    for k, v in noise.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            r.fail(r.line_of(noise, k), f"noise.{k}", f"expected a number, got {v!r}")
    try:
        return Scene(facets, lidar, {k: noise[k] for k in noise}, str(doc.get("name", Path(str(path)).stem)))
    except ValueError as exc:
        r.fail(r.line_of(doc, "facets"), "facets", str(exc))


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneFormatError(path, None, "", f"cannot read scene: {exc.strerror}") from exc
    return parse_scene(text, path)


def _flt(x) -> float:
    return float(x)


def scene_to_dict(scene: Scene) -> dict:
    lid, g = scene.lidar, scene.lidar.grid
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "name": scene.name,
        "lidar": {
            "L": [_flt(x) for x in lid.L],
            "C": [_flt(x) for x in lid.C],
            "c": _flt(lid.c),
            "detector": {"h_rad": [g.h_min, g.h_max], "v_rad": [g.v_min, g.v_max], "n_h": g.n_h, "n_v": g.n_v},
            "beams": [[_flt(x) for x in b] for b in lid.beams],
        },
        "facets": [],
        "noise": {k: scene.noise[k] for k in sorted(scene.noise)},
    }
    for f in scene.facets:
        m = f.material
        mat: dict = {"kind": m.kind}
        if m.kind == "diffuse":
            mat["albedo"] = m.albedo
        else:
            mat["reflectance"] = m.reflectance
        if m.kind == "transparent":
            mat["transmittance"] = m.transmittance
        entry = {"id": f.id}
        if f.object is not None:
            entry["object"] = f.object
        entry["material"] = mat
        entry["vertices"] = [[_flt(x) for x in v] for v in f.vertices]
        doc["facets"].append(entry)
    return doc


class _FlowDumper(yaml.SafeDumper):
    pass


def _repr_list(dumper, data):
    # short numeric lists on one line keep vertex tables readable
    flow = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in data) and len(data) <= 4
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_FlowDumper.add_representer(list, _repr_list)


def dump_scene_text(scene: Scene) -> str:
    return yaml.dump(scene_to_dict(scene), Dumper=_FlowDumper, sort_keys=False, width=120)


def dump_scene(scene: Scene, path) -> None:
    Path(path).write_text(f"# multibounce scene, format {SCENE_FORMAT_VERSION}\n" + dump_scene_text(scene))


# --- spots -------------------------------------------------------------------


def _f(x) -> str:
    return repr(float(x))


def _header_lines(kind: str, run_id: str) -> str:
    return f"# multibounce {kind} v1\n# run_id={run_id}\n"


def _read_header(path: Path) -> tuple[str, list]:
    run_id, rows = "", []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("# run_id="):
            run_id = ln.split("=", 1)[1].strip()
        elif not ln.startswith("#"):
            body.append(ln)
    rows = list(csv.reader(body))
    return run_id, rows


def write_spots(exposures: Sequence[Exposure], path, run_id: str = "") -> None:
    out = _io.StringIO()
    out.write(_header_lines("spots", run_id))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SPOTS_HEADER)
    for exp in exposures:
        for i, sp in enumerate(exp.spots):
            d = sp.direction
            w.writerow([exp.beam_index, i, _f(d[0]), _f(d[1]), _f(d[2]), _f(sp.tof), _f(sp.energy), _f(sp.tof_sigma),
                        ";".join(str(s) for s in sp.sources)])
    Path(path).write_text(out.getvalue())


def read_spots(path, beam_indices: Optional[Sequence[int]] = None) -> tuple[list, str]:
    """Exposures and run id.  ``beam_indices`` adds empty exposures for beams with no spots."""
    path = Path(path)
    run_id, rows = _read_header(path)
    if not rows or rows[0] != SPOTS_HEADER:
        raise ValueError(f"{path}: not a spots file (header {rows[0] if rows else None!r})")
    by_beam: dict = {b: [] for b in (beam_indices or [])}
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(SPOTS_HEADER):
            raise ValueError(f"{path}: row {n}: expected {len(SPOTS_HEADER)} columns")
        b = int(row[0])
        src = tuple(int(s) for s in row[8].split(";") if s)
        sp = Spot(np.array([float(row[2]), float(row[3]), float(row[4])]), float(row[5]), float(row[6]), float(row[7]), src)
        by_beam.setdefault(b, []).append(sp)
    return [Exposure(b, by_beam[b]) for b in sorted(by_beam)], run_id


# --- ground-truth paths ---------------------------------------------------------


def paths_to_dict(paths: Sequence[PathRecord], run_id: str = "") -> dict:
    return {
        "schema": "multibounce.paths",
        "version": 1,
        "run_id": run_id,
        "paths": [
            {
                "path_id": r.path_id,
                "beam_index": r.beam_index,
                "kinds": r.kinds,
                "surface_ids": list(r.surface_ids),
                "transmissions": list(r.transmissions),
                "vertices": [[float(x) for x in v] for v in r.vertices],
                "path_length": r.path_length,
                "relative_energy": r.relative_energy,
                "spot_kind": r.spot_kind,
            }
            for r in paths
        ],
    }


def write_paths(paths: Sequence[PathRecord], path, run_id: str = "") -> None:
    write_json(paths_to_dict(paths, run_id), path)


def read_paths(path) -> tuple[list, str]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "multibounce.paths":
        raise ValueError(f"{path}: not a ground-truth paths file")
    recs = []
    for d in doc["paths"]:
        recs.append(
            PathRecord(
                vertices=np.array(d["vertices"], dtype=float),
                kinds=d["kinds"],
                surface_ids=tuple(d["surface_ids"]),
                path_length=float(d["path_length"]),
                relative_energy=float(d["relative_energy"]),
                beam_index=int(d["beam_index"]),
                transmissions=tuple(d["transmissions"]),
                path_id=int(d["path_id"]),
            )
        )
    return recs, doc.get("run_id", "")


# --- point clouds ----------------------------------------------------------------


def write_pointcloud_csv(points: Sequence[ReconstructedPoint], path, run_id: str = "") -> None:
    out = _io.StringIO()
    out.write(_header_lines("pointcloud", run_id))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(POINT_HEADER)
    for p in points:
        n = ["", "", ""] if p.normal is None else [_f(x) for x in p.normal]
        w.writerow([_f(p.position[0]), _f(p.position[1]), _f(p.position[2]), *n, p.label, p.eq_tag, p.beam_index])
    Path(path).write_text(out.getvalue())


def read_pointcloud_csv(path) -> tuple[list, str]:
    path = Path(path)
    run_id, rows = _read_header(path)
    if not rows or rows[0] != POINT_HEADER:
        raise ValueError(f"{path}: not a point cloud file")
    pts = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(POINT_HEADER):
            raise ValueError(f"{path}: row {n}: expected {len(POINT_HEADER)} columns")
        normal = None if row[3] == "" else np.array([float(x) for x in row[3:6]])
        pts.append(ReconstructedPoint(np.array([float(x) for x in row[0:3]]), normal, row[6], row[7], int(row[8])))
    return pts, run_id


def write_pointcloud_ply(points: Sequence[ReconstructedPoint], path, run_id: str = "") -> None:
    """ASCII PLY; ``label`` is an index into the label list given in the header comments."""
    out = _io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"comment run_id {run_id}\n")
    for i, name in enumerate(LABELS):
        out.write(f"comment label {i} {name}\n")
    out.write(f"element vertex {len(points)}\n")
    for name in ("x", "y", "z", "nx", "ny", "nz"):
        out.write(f"property double {name}\n")
    out.write("property int label\nproperty int beam_index\nend_header\n")
    for p in points:
        n = (0.0, 0.0, 0.0) if p.normal is None else p.normal
        vals = [_f(x) for x in (*p.position, *n)]
        out.write(" ".join(vals) + f" {LABELS.index(p.label)} {p.beam_index}\n")
    Path(path).write_text(out.getvalue())


def read_pointcloud_ply(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    end = lines.index("end_header")
    count = next(int(ln.split()[2]) for ln in lines[:end] if ln.startswith("element vertex"))
    rows = [ln.split() for ln in lines[end + 1 : end + 1 + count]]
    return [(np.array([float(x) for x in r[0:3]]), np.array([float(x) for x in r[3:6]]), LABELS[int(r[6])], int(r[7])) for r in rows]


# --- spot classifications --------------------------------------------------------


def write_classifications(results, path, run_id: str = "") -> None:
    out = _io.StringIO()
    out.write(_header_lines("classification", run_id))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CLASS_HEADER)
    for res in results:
        for i in sorted(res.kinds):
            w.writerow([res.beam_index, i, res.kinds[i], res.roles.get(i, "?")])
    Path(path).write_text(out.getvalue())


def read_classifications(path) -> tuple[dict, str]:
    """``{(beam_index, spot_index): (kind, bounce_class)}`` and the run id."""
    run_id, rows = _read_header(Path(path))
    if not rows or rows[0] != CLASS_HEADER:
        raise ValueError(f"{path}: not a classification file")
    return {(int(r[0]), int(r[1])): (r[2], r[3]) for r in rows[1:]}, run_id


# --- JSON ------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
