"""File formats: PLY meshes, fragment/scene/params JSON, field binaries,
results CSV, and 16-bit depth PNGs.

Every writer is atomic (temp file in the target directory, then rename)
and deterministic, so rewriting loaded data reproduces the original bytes.
JSON floats are serialized with repr, which round-trips doubles exactly.
"""

import io
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatchError,
    ModelMismatchError,
    NonTriangulatedError,
    ParseError,
)
from .field import PredictionField
from .fragments import FragmentedModel, MeshModel
from .geometry import CameraIntrinsics, Pose

FIELD_MAGIC = b"FRAGFLD1"
DEPTH_UNIT_MM = 0.1  # one PNG count = 0.1 mm, up to ~6.5 m
RESULTS_HEADER = "scene_id,im_id,obj_id,score,R,t,time"

MODEL_FILE = "obj_{:06d}.ply"
FRAGMENTS_FILE = "frags_{:06d}.json"
SYMMETRIES_FILE = "sym_{:06d}.json"


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _load_json(path):
    try:
        with open(path, "rb") as fh:
            return json.loads(fh.read().decode())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, line=exc.lineno) from exc


# ---------------------------------------------------------------------------
# PLY meshes

_PLY_SCALARS = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise ParseError("not a PLY file (missing magic)", path=path, line=1)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("unterminated header", path=path, line=1)
    newline = data.find(b"\n", end)
    if newline < 0:
        raise ParseError("header end line is not newline-terminated", path=path)
    body_offset = newline + 1
    try:
        header = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("header is not ASCII", path=path, offset=exc.start) from exc

    fmt = None
    elements = []  # (name, count, [(kind, prop_name, dtypes...)])
    for lineno, raw in enumerate(header.splitlines(), start=1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format: {raw.strip()}", path=path, line=lineno)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError("malformed element line", path=path, line=lineno)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", path=path, line=lineno)
            props = elements[-1][2]
            if tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_SCALARS \
                        or tokens[3] not in _PLY_SCALARS:
                    raise ParseError("malformed list property", path=path, line=lineno)
                props.append(("list", tokens[4], _PLY_SCALARS[tokens[2]],
                              _PLY_SCALARS[tokens[3]]))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_SCALARS:
                    raise ParseError("malformed property line", path=path, line=lineno)
                props.append(("scalar", tokens[2], _PLY_SCALARS[tokens[1]]))
        else:
            raise ParseError(f"unknown header keyword: {tokens[0]}", path=path, line=lineno)
    if fmt is None:
        raise ParseError("missing format line", path=path, line=1)
    return fmt, elements, body_offset, header.count("\n") + 2


def _ascii_rows(data: bytes, body_offset: int, path):
    try:
        text = data[body_offset:].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("body is not ASCII", path=path,
                         offset=body_offset + exc.start) from exc
    return [line.split() for line in text.splitlines()]


def load_mesh_ply(path, object_id: int = 1) -> MeshModel:
    """Triangle mesh from an ASCII or binary-little-endian PLY file.

    Vertex x/y/z may be any scalar type; extra vertex properties are
    skipped.  Faces must be triangles.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body_offset, body_line = _parse_ply_header(data, path)

    names = [name for name, _, _ in elements]
    if "vertex" not in names or "face" not in names:
        raise ParseError("PLY must declare vertex and face elements", path=path)

    vertices = None
    faces = None
    if fmt == "ascii":
        rows = _ascii_rows(data, body_offset, path)
        cursor = 0
        for name, count, props in elements:
            if cursor + count > len(rows):
                raise ParseError(f"file ends inside element {name}", path=path,
                                 line=body_line + len(rows))
            chunk = rows[cursor:cursor + count]
            if name == "vertex":
                vertices = _ascii_vertices(chunk, props, path, body_line + cursor)
            elif name == "face":
                faces = _ascii_faces(chunk, props, path, body_line + cursor)
            cursor += count
    else:
        cursor = body_offset
        for name, count, props in elements:
            if name == "vertex":
                vertices, cursor = _binary_vertices(data, cursor, count, props, path)
            elif name == "face":
                faces, cursor = _binary_faces(data, cursor, count, props, path)
            else:
                if any(kind == "list" for kind, *_ in props):
                    raise ParseError(f"cannot skip list-typed element {name}",
                                     path=path, offset=cursor)
                width = sum(np.dtype(dt).itemsize for _, _, dt in props)
                cursor += width * count
                if cursor > len(data):
                    raise ParseError(f"file ends inside element {name}",
                                     path=path, offset=len(data))
    return MeshModel(object_id=object_id, vertices=vertices, triangles=faces)


def _vertex_columns(props, path):
    cols = {}
    for idx, (kind, name, *dt) in enumerate(props):
        if kind == "list":
            raise ParseError("list property in vertex element", path=path)
        cols[name] = idx
    for axis in ("x", "y", "z"):
        if axis not in cols:
            raise ParseError(f"vertex element lacks property {axis}", path=path)
    return cols


def _ascii_vertices(rows, props, path, first_line):
    cols = _vertex_columns(props, path)
    out = np.empty((len(rows), 3))
    for i, tokens in enumerate(rows):
        if len(tokens) != len(props):
            raise ParseError("wrong token count in vertex row", path=path,
                             line=first_line + i)
        try:
            out[i] = [float(tokens[cols["x"]]), float(tokens[cols["y"]]),
                      float(tokens[cols["z"]])]
        except ValueError as exc:
            raise ParseError(f"bad vertex value: {exc}", path=path,
                             line=first_line + i) from exc
    return out


def _ascii_faces(rows, props, path, first_line):
    if len(props) != 1 or props[0][0] != "list":
        raise ParseError("face element must hold exactly one list property", path=path)
    out = np.empty((len(rows), 3), dtype=np.int64)
    for i, tokens in enumerate(rows):
        if not tokens:
            raise ParseError("empty face row", path=path, line=first_line + i)
        try:
            arity = int(tokens[0])
            if arity != 3:
                raise NonTriangulatedError(
                    f"face with {arity} vertices at line {first_line + i}")
            if len(tokens) != 4:
                raise ParseError("face row token count mismatch", path=path,
                                 line=first_line + i)
            out[i] = [int(t) for t in tokens[1:4]]
        except ValueError as exc:
            raise ParseError(f"bad face value: {exc}", path=path,
                             line=first_line + i) from exc
    return out


def _binary_vertices(data, cursor, count, props, path):
    cols = _vertex_columns(props, path)
    dtype = np.dtype([(name, "<" + dt) for kind, name, dt in props])
    end = cursor + dtype.itemsize * count
    if end > len(data):
        raise ParseError("file ends inside vertex element", path=path, offset=len(data))
    table = np.frombuffer(data, dtype=dtype, count=count, offset=cursor)
    out = np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64)
    return out, end


def _binary_faces(data, cursor, count, props, path):
    if len(props) != 1 or props[0][0] != "list":
        raise ParseError("face element must hold exactly one list property", path=path)
    _, _, count_dt, index_dt = props[0]
    count_size = np.dtype(count_dt).itemsize
    index_size = np.dtype(index_dt).itemsize
    out = np.empty((count, 3), dtype=np.int64)
    for i in range(count):
        if cursor + count_size > len(data):
            raise ParseError("file ends inside face element", path=path, offset=len(data))
        arity = int(np.frombuffer(data, "<" + count_dt, 1, cursor)[0])
        cursor += count_size
        if arity != 3:
            raise NonTriangulatedError(f"face with {arity} vertices at offset {cursor}")
        if cursor + 3 * index_size > len(data):
            raise ParseError("file ends inside face element", path=path, offset=len(data))
        out[i] = np.frombuffer(data, "<" + index_dt, 3, cursor)
        cursor += 3 * index_size
    return out, cursor


# ---------------------------------------------------------------------------
# Fragment decompositions

def save_fragments(fragmented: FragmentedModel, path):
    doc = {
        "object_id": int(fragmented.model.object_id),
        "n_fragments": int(fragmented.n_fragments),
        "centers": fragmented.centers.tolist(),
        "scales": fragmented.scales.tolist(),
        "vertex_fragment": fragmented.vertex_fragment.tolist(),
    }
    _atomic_write(path, _dump_json(doc))


def load_fragments(path, model: MeshModel) -> FragmentedModel:
    doc = _load_json(path)
    for key in ("object_id", "n_fragments", "centers", "scales", "vertex_fragment"):
        if key not in doc:
            raise ParseError(f"fragment file lacks key {key}", path=path)
    if int(doc["object_id"]) != model.object_id:
        raise ModelMismatchError(
            f"fragments are for object {doc['object_id']}, mesh is {model.object_id}")
    fragmented = FragmentedModel(
        model=model,
        centers=np.asarray(doc["centers"], dtype=np.float64),
        scales=np.asarray(doc["scales"], dtype=np.float64),
        vertex_fragment=np.asarray(doc["vertex_fragment"], dtype=np.int64),
    )
    if fragmented.n_fragments != int(doc["n_fragments"]):
        raise ParseError("n_fragments disagrees with centers", path=path)
    return fragmented


# ---------------------------------------------------------------------------
# Symmetry sets

def save_symmetries(symmetries, path):
    doc = [{"R": list(map(float, sym.rotation.flat)),
            "t": list(map(float, sym.translation))} for sym in symmetries]
    _atomic_write(path, _dump_json(doc))


def load_symmetries(path):
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise ParseError("symmetry file must hold a list", path=path)
    out = []
    for entry in doc:
        rot = np.asarray(entry["R"], dtype=np.float64).reshape(3, 3)
        tra = np.asarray(entry["t"], dtype=np.float64)
        out.append(Pose(rot, tra))
    return tuple(out)


# ---------------------------------------------------------------------------
# Scene descriptions

@dataclass(frozen=True)
class SceneDescription:
    """Ground truth for one image: camera plus posed instances."""

    camera: CameraIntrinsics
    instances: tuple  # of (object_id, Pose)
    scene_id: int = 1
    im_id: int = 1
    depth_path: str = ""

    def instance_counts(self) -> dict:
        counts: dict = {}
        for oid, _ in self.instances:
            counts[int(oid)] = counts.get(int(oid), 0) + 1
        return counts


def save_scene(scene: SceneDescription, path):
    cam = scene.camera
    doc = {
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "scene_id": scene.scene_id,
        "im_id": scene.im_id,
        "instances": [
            {"object_id": int(oid),
             "R": list(map(float, pose.rotation.flat)),
             "t": list(map(float, pose.translation))}
            for oid, pose in scene.instances
        ],
        "depth_path": scene.depth_path,
    }
    _atomic_write(path, _dump_json(doc))


def load_scene(path) -> SceneDescription:
    doc = _load_json(path)
    try:
        cam = doc["camera"]
        camera = CameraIntrinsics(fx=cam["fx"], fy=cam["fy"], cx=cam["cx"],
                                  cy=cam["cy"], width=cam["width"],
                                  height=cam["height"])
        instances = tuple(
            (int(inst["object_id"]),
             Pose(np.asarray(inst["R"], dtype=np.float64).reshape(3, 3),
                  np.asarray(inst["t"], dtype=np.float64)))
            for inst in doc["instances"])
    except KeyError as exc:
        raise ParseError(f"scene file lacks key {exc.args[0]}", path=path) from exc
    return SceneDescription(camera=camera, instances=instances,
                            scene_id=int(doc.get("scene_id", 1)),
                            im_id=int(doc.get("im_id", 1)),
                            depth_path=str(doc.get("depth_path", "")))


# ---------------------------------------------------------------------------
# Prediction field binaries

def save_field(pred: PredictionField, path, scene_id: int = 1, im_id: int = 1,
               instance_counts: dict | None = None,
               camera: CameraIntrinsics | None = None):
    """Binary field container: magic, JSON header, then a/b/r as <f4."""
    header = {
        "m": pred.m, "n": pred.n, "stride": pred.stride,
        "width": pred.width, "height": pred.height,
        "object_ids": [int(i) for i in pred.object_ids],
        "scene_id": int(scene_id), "im_id": int(im_id),
        "instance_counts": {str(k): int(v) for k, v in (instance_counts or {}).items()},
        "dtype": "<f4", "order": "a,b,r",
    }
    if camera is not None:
        header["camera"] = {"fx": camera.fx, "fy": camera.fy,
                            "cx": camera.cx, "cy": camera.cy}
    blob = _dump_json(header)
    parts = [FIELD_MAGIC, struct.pack("<I", len(blob)), blob]
    for tensor in (pred.a, pred.b, pred.r):
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def load_field(path):
    """(PredictionField, header dict) from a field binary."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != FIELD_MAGIC:
        raise ParseError("bad field magic", path=path, offset=0)
    if len(data) < 12:
        raise ParseError("truncated field header", path=path, offset=len(data))
    (header_len,) = struct.unpack("<I", data[8:12])
    if 12 + header_len > len(data):
        raise ParseError("truncated field header", path=path, offset=len(data))
    try:
        header = json.loads(data[12:12 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad field header: {exc}", path=path, offset=12) from exc

    try:
        m, n, stride = header["m"], header["n"], header["stride"]
        width, height = header["width"], header["height"]
        object_ids = tuple(int(i) for i in header["object_ids"])
    except KeyError as exc:
        raise ParseError(f"field header lacks key {exc.args[0]}", path=path) from exc
    hc, wc = height // stride, width // stride
    sizes = ((m + 1) * hc * wc, m * n * hc * wc, m * n * 3 * hc * wc)
    need = 12 + header_len + 4 * sum(sizes)
    if len(data) != need:
        raise ParseError(f"field payload is {len(data)} bytes, expected {need}",
                         path=path, offset=len(data))
    cursor = 12 + header_len
    tensors = []
    for size in sizes:
        tensors.append(np.frombuffer(data, "<f4", size, cursor).astype(np.float64))
        cursor += 4 * size
    pred = PredictionField(
        stride=stride, width=width, height=height, object_ids=object_ids,
        a=tensors[0].reshape(m + 1, hc, wc),
        b=tensors[1].reshape(m, n, hc, wc),
        r=tensors[2].reshape(m, n, 3, hc, wc),
    ).validate()
    return pred, header


def camera_from_field_header(header: dict, path=None) -> CameraIntrinsics:
    cam = header.get("camera")
    if cam is None:
        raise ParseError("field header lacks camera intrinsics", path=path)
    return CameraIntrinsics(fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
                            width=header["width"], height=header["height"])


# ---------------------------------------------------------------------------
# Results CSV

@dataclass(frozen=True)
class ResultRow:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose
    time: float


def _result_sort_key(row: ResultRow):
    return (row.scene_id, row.im_id, row.obj_id, -row.score)


def save_results(rows, path):
    lines = [RESULTS_HEADER]
    for row in sorted(rows, key=_result_sort_key):
        rot = " ".join(repr(float(v)) for v in row.pose.rotation.flat)
        tra = " ".join(repr(float(v)) for v in row.pose.translation)
        lines.append(f"{row.scene_id},{row.im_id},{row.obj_id},"
                     f"{row.score!r},{rot},{tra},{row.time!r}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_results(path):
    with open(path, "rb") as fh:
        text = fh.read().decode()
    lines = text.splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ParseError("missing results header", path=path, line=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ParseError("wrong column count", path=path, line=lineno)
        try:
            rot = np.array([float(v) for v in parts[4].split()]).reshape(3, 3)
            tra = np.array([float(v) for v in parts[5].split()])
            rows.append(ResultRow(scene_id=int(parts[0]), im_id=int(parts[1]),
                                  obj_id=int(parts[2]), score=float(parts[3]),
                                  pose=Pose(rot, tra), time=float(parts[6])))
        except ValueError as exc:
            raise ParseError(f"bad results value: {exc}", path=path, line=lineno) from exc
    return rows


# ---------------------------------------------------------------------------
# Depth PNGs

def save_depth_png(depth_mm: np.ndarray, path):
    """16-bit grayscale PNG at 0.1 mm per count; 0 keeps meaning no-depth."""
    depth_mm = np.asarray(depth_mm, dtype=np.float64)
    counts = np.rint(depth_mm / DEPTH_UNIT_MM)
    if counts.max(initial=0.0) > 65535:
        raise DimensionMismatchError("depth beyond 6.5535 m does not fit 16 bits")
    if counts.min(initial=0.0) < 0:
        raise DimensionMismatchError("negative depth")
    image = Image.fromarray(counts.astype(np.uint16))
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as image:
        counts = np.asarray(image)
    return counts.astype(np.float64) * DEPTH_UNIT_MM


# ---------------------------------------------------------------------------
# Pipeline parameter bundles

DEFAULT_PARAMS = {
    "tau_a": 0.1,
    "tau_b": 0.5,
    "tau_d": 20.0,
    "tau_r": 4.0,
    "tau_i": 400,
    "tau_q": 0.5,
    "tau_t": 100.0,
    "spatial_weight": 0.1,
    "label_cost": 10.0,
    "rng_seed": 0,
    "max_instances": 8,
    "prosac_budget": None,
    "lambda1": 1.0,
    "lambda2": 100.0,
    "vsd_delta": 15.0,
    "visibility_tolerance": 15.0,
    "n_fragments": 64,
}


def load_params(path=None) -> dict:
    """Defaults overlaid with the JSON file; unknown keys are rejected."""
    params = dict(DEFAULT_PARAMS)
    if path is None:
        return params
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ParseError("params file must hold an object", path=path)
    unknown = sorted(set(doc) - set(DEFAULT_PARAMS))
    if unknown:
        raise ParseError(f"unknown params keys: {', '.join(unknown)}", path=path)
    params.update(doc)
    return params


def save_params(params: dict, path):
    _atomic_write(path, _dump_json(params))


# ---------------------------------------------------------------------------
# Model directories

def model_ids_in(directory):
    """Object ids present as obj_*.ply files, ascending."""
    pattern = re.compile(r"obj_(\d{6})\.ply$")
    ids = []
    for name in os.listdir(directory):
        match = pattern.fullmatch(name)
        if match:
            ids.append(int(match.group(1)))
    return sorted(ids)


def load_model_entry(directory, object_id: int):
    """(FragmentedModel, SymmetrySet) for one object of a model directory.

    The mesh and fragment files must exist; the symmetry file is optional
    and defaults to the identity-only set.
    """
    mesh_path = os.path.join(directory, MODEL_FILE.format(object_id))
    frag_path = os.path.join(directory, FRAGMENTS_FILE.format(object_id))
    sym_path = os.path.join(directory, SYMMETRIES_FILE.format(object_id))
    model = load_mesh_ply(mesh_path, object_id=object_id)
    fragmented = load_fragments(frag_path, model)
    if os.path.exists(sym_path):
        symmetries = load_symmetries(sym_path)
    else:
        symmetries = (Pose(np.eye(3), np.zeros(3)),)
    return fragmented, symmetries
