# utils/artifact_io.py

"""
On-disk formats of every artifact the pipeline reads or writes.

Binary artifacts share one header layout:
    magic (5 bytes) | config hash (16 ASCII bytes) | format-specific fields
and store numbers as little-endian 64-bit floats / unsigned integers.

    WFLD1  field snapshots        n_nodes, n_steps, step-major data
    WGRN1  Green operator         mode byte, source byte, dt, K, kernel or row-major dense
    WPRJ1  null-space projector   n, r, L, n_rows, rows..., column-major basis
    WNET1  classifier parameters  n_arrays, then per array name + shape, then data
    WSPC1  one spectrogram        L, M, floor_db, row-major dB values

Text artifacts: the `trimesh v1` mesh, `spsym v1` sparse matrices and the CSV
files (signals, spectrograms, manifest, training log, attack report).

Readers raise `MissingArtifactError` for absent files and
`ArtifactMismatchError` for a wrong magic or a config hash that differs from
the expected one.
"""
import csv
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from physics.adjoint_green import DENSE, KERNEL, GreenOperator
from physics.fem_assembly import Rectangle, TriMesh
from signal_processing.spectral import BandSelector, NullspaceProjector
from utils.errors import ArtifactMismatchError, InvalidInputError, MissingArtifactError

logger = logging.getLogger("WaveAttack.IO")

PathLike = Union[str, Path]
HASH_BYTES = 16
_SOURCES = ("interferer", "intruder")
_MODES = (KERNEL, DENSE)

MANIFEST_FIELDS = ["id", "frequency_hz", "label", "seed", "path"]
TRAINING_LOG_FIELDS = ["epoch", "train_loss", "test_loss", "test_acc"]
ATTACK_REPORT_FIELDS = ["example_id", "freq_hz", "label", "clean_conf", "adv_conf", "iters", "success", "amp_ratio"]


def _require(path: PathLike) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Required artifact not found: {path}")
    return path


def _check_hash(path: Path, found: str, expected: Optional[str]) -> None:
    if expected is not None and found != expected:
        raise ArtifactMismatchError(
            f"{path} was written for config hash {found}, active config has {expected}. Rerun the producing command."
        )


def _hash_bytes(config_hash: str) -> bytes:
    raw = (config_hash or "").encode("ascii")
    if len(raw) > HASH_BYTES:
        raise InvalidInputError(f"Config hash '{config_hash}' is longer than {HASH_BYTES} characters.")
    return raw.ljust(HASH_BYTES, b"\0")


class _Reader:
    """Sequential little-endian reader over a binary artifact."""

    def __init__(self, path: Path, data: bytes):
        self.path = path
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArtifactMismatchError(f"{self.path} is truncated.")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def byte(self) -> int:
        return self.take(1)[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(float)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise ArtifactMismatchError(f"{self.path} has {len(self.data) - self.pos} unexpected trailing bytes.")


def _open_binary(path: PathLike, magic: bytes, expected_hash: Optional[str]) -> Tuple[_Reader, str]:
    path = _require(path)
    reader = _Reader(path, path.read_bytes())
    found_magic = reader.take(len(magic))
    if found_magic != magic:
        raise ArtifactMismatchError(f"{path} is not a {magic.decode()} file (magic {found_magic!r}).")
    found_hash = reader.take(HASH_BYTES).rstrip(b"\0").decode("ascii")
    _check_hash(path, found_hash, expected_hash)
    return reader, found_hash


def _write_binary(path: PathLike, magic: bytes, config_hash: str, parts: Iterable[bytes]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(_hash_bytes(config_hash))
        for part in parts:
            f.write(part)
    return path


def _f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


# ---------------------------------------------------------------- mesh / matrices

def write_mesh(path: PathLike, mesh: TriMesh, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"trimesh v1 {mesh.num_nodes} {mesh.num_triangles} {len(mesh.boundary_edges)} {config_hash or '-'}\n")
        f.write("domain " + " ".join(repr(float(v)) for v in mesh.domain) + "\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r}\n")
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
        for a, b in mesh.boundary_edges:
            f.write(f"{a} {b}\n")
    return path


def read_mesh(path: PathLike, expected_hash: Optional[str] = None) -> TriMesh:
    path = _require(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    if header[:2] != ["trimesh", "v1"] or len(header) != 6:
        raise ArtifactMismatchError(f"{path} is not a 'trimesh v1' file.")
    nv, nt, nb = (int(v) for v in header[2:5])
    _check_hash(path, "" if header[5] == "-" else header[5], expected_hash)
    domain_fields = lines[1].split()
    if domain_fields[0] != "domain":
        raise ArtifactMismatchError(f"{path}: missing domain line.")
    domain = Rectangle(*(float(v) for v in domain_fields[1:5]))
    body = lines[2:]
    if len(body) != nv + nt + nb:
        raise ArtifactMismatchError(f"{path}: expected {nv + nt + nb} data lines, found {len(body)}.")
    vertices = np.array([[float(v) for v in line.split()] for line in body[:nv]]).reshape(nv, 2)
    triangles = np.array([[int(v) for v in line.split()] for line in body[nv:nv + nt]], dtype=np.int64).reshape(nt, 3)
    edges = np.array([[int(v) for v in line.split()] for line in body[nv + nt:]], dtype=np.int64).reshape(nb, 2)
    return TriMesh(vertices=vertices, triangles=triangles, boundary_edges=edges, domain=domain)


def write_spsym(path: PathLike, matrix: sp.spmatrix) -> Path:
    """Upper triangle (i <= j) of a symmetric sparse matrix as `i j value` lines."""
    upper = sp.triu(matrix).tocoo()
    order = np.lexsort((upper.col, upper.row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"spsym v1 {matrix.shape[0]} {upper.nnz}\n")
        for k in order:
            f.write(f"{upper.row[k]} {upper.col[k]} {float(upper.data[k])!r}\n")
    return path


def read_spsym(path: PathLike) -> sp.csr_matrix:
    path = _require(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    if header[:2] != ["spsym", "v1"]:
        raise ArtifactMismatchError(f"{path} is not a 'spsym v1' file.")
    n, nnz = int(header[2]), int(header[3])
    entries = [line.split() for line in lines[1:1 + nnz]]
    rows = np.array([int(e[0]) for e in entries], dtype=np.int64)
    cols = np.array([int(e[1]) for e in entries], dtype=np.int64)
    vals = np.array([float(e[2]) for e in entries])
    upper = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return (upper + sp.triu(upper, k=1).T).tocsr()


# ---------------------------------------------------------------- signals / fields

def write_signal_csv(path: PathLike, samples: np.ndarray, dt: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "value"])
        for k, value in enumerate(np.asarray(samples, dtype=float)):
            writer.writerow([repr(k * dt), repr(float(value))])
    return path


def read_signal_csv(path: PathLike) -> Tuple[np.ndarray, float]:
    """Returns (samples, dt); dt is taken from the first two time stamps."""
    path = _require(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    t = np.array([float(r["t"]) for r in rows])
    values = np.array([float(r["value"]) for r in rows])
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
    return values, dt


def write_field(path: PathLike, history: np.ndarray, config_hash: str = "") -> Path:
    history = np.asarray(history, dtype=float)
    n_steps, n_nodes = history.shape
    return _write_binary(path, b"WFLD1", config_hash,
                         [struct.pack("<QQ", n_nodes, n_steps), _f64(history)])


def read_field(path: PathLike, expected_hash: Optional[str] = None) -> np.ndarray:
    reader, _ = _open_binary(path, b"WFLD1", expected_hash)
    n_nodes, n_steps = reader.u64(), reader.u64()
    data = reader.floats(n_nodes * n_steps).reshape(n_steps, n_nodes)
    reader.finish()
    return data


# ---------------------------------------------------------------- operators

def write_green(path: PathLike, G: GreenOperator, config_hash: str = "") -> Path:
    data = G.kernel if G.mode == KERNEL else G.dense
    header = struct.pack("<BBdQ", _MODES.index(G.mode), _SOURCES.index(G.source), G.dt, G.num_steps)
    written = _write_binary(path, b"WGRN1", config_hash, [header, _f64(data)])
    logger.debug(f"Wrote {G.mode} Green operator for {G.source} to {written}.")
    return written


def read_green(path: PathLike, expected_hash: Optional[str] = None) -> GreenOperator:
    reader, _ = _open_binary(path, b"WGRN1", expected_hash)
    mode = _MODES[reader.byte()]
    source = _SOURCES[reader.byte()]
    dt = reader.f64()
    K = reader.u64()
    if mode == KERNEL:
        G = GreenOperator(mode=mode, dt=dt, num_steps=K, source=source, kernel=reader.floats(K - 1))
    else:
        n = K + 1
        G = GreenOperator(mode=mode, dt=dt, num_steps=K, source=source, dense=reader.floats(n * n).reshape(n, n))
    reader.finish()
    return G


def write_projector(path: PathLike, projector: NullspaceProjector, config_hash: str = "") -> Path:
    rows = projector.selector.rows
    header = struct.pack("<QQQQ", projector.dim, projector.rank, projector.selector.num_freqs, len(rows))
    row_bytes = struct.pack(f"<{len(rows)}Q", *rows)
    basis = np.asarray(projector.basis, dtype=float).ravel(order="F")
    return _write_binary(path, b"WPRJ1", config_hash, [header, row_bytes, _f64(basis)])


def read_projector(path: PathLike, expected_hash: Optional[str] = None,
                   constraint: Optional[np.ndarray] = None) -> NullspaceProjector:
    reader, _ = _open_binary(path, b"WPRJ1", expected_hash)
    n, r, L, n_rows = reader.u64(), reader.u64(), reader.u64(), reader.u64()
    rows = struct.unpack(f"<{n_rows}Q", reader.take(8 * n_rows))
    basis = reader.floats(n * r).reshape((n, r), order="F")
    reader.finish()
    return NullspaceProjector(basis=np.ascontiguousarray(basis),
                              selector=BandSelector(rows=rows, num_freqs=L), constraint=constraint)


def write_named_arrays(path: PathLike, arrays: Dict[str, np.ndarray], config_hash: str = "",
                       magic: bytes = b"WNET1") -> Path:
    """Shape table (name, ndim, dims) for every array, then all data in table order."""
    table = [struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        shape = np.shape(value)
        table.append(struct.pack("<I", len(encoded)) + encoded)
        table.append(struct.pack(f"<I{len(shape)}Q", len(shape), *shape))
    data = [_f64(np.asarray(value, dtype=float).ravel()) for value in arrays.values()]
    return _write_binary(path, magic, config_hash, table + data)


def read_named_arrays(path: PathLike, expected_hash: Optional[str] = None,
                      magic: bytes = b"WNET1") -> Dict[str, np.ndarray]:
    reader, _ = _open_binary(path, magic, expected_hash)
    count = struct.unpack("<I", reader.take(4))[0]
    table = []
    for _ in range(count):
        name_len = struct.unpack("<I", reader.take(4))[0]
        name = reader.take(name_len).decode("utf-8")
        ndim = struct.unpack("<I", reader.take(4))[0]
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim))
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = reader.floats(size).reshape(shape)
    reader.finish()
    return arrays


# ---------------------------------------------------------------- spectrograms

def write_spectrogram(path: PathLike, values: np.ndarray, floor_db: float, config_hash: str = "") -> Path:
    values = np.asarray(values, dtype=float)
    L, M = values.shape
    return _write_binary(path, b"WSPC1", config_hash, [struct.pack("<QQd", L, M, floor_db), _f64(values)])


def read_spectrogram(path: PathLike, expected_hash: Optional[str] = None) -> Tuple[np.ndarray, float]:
    reader, _ = _open_binary(path, b"WSPC1", expected_hash)
    L, M = reader.u64(), reader.u64()
    floor_db = reader.f64()
    values = reader.floats(L * M).reshape(L, M)
    reader.finish()
    return values, floor_db


def write_spectrogram_csv(path: PathLike, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["freq_index", "window_index", "db"])
        for (l, m), value in np.ndenumerate(values):
            writer.writerow([l, m, repr(float(value))])
    return path


def read_spectrogram_csv(path: PathLike) -> np.ndarray:
    path = _require(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    L = 1 + max(int(r["freq_index"]) for r in rows)
    M = 1 + max(int(r["window_index"]) for r in rows)
    values = np.zeros((L, M))
    for r in rows:
        values[int(r["freq_index"]), int(r["window_index"])] = float(r["db"])
    return values


def spectrogram_to_gray(values: np.ndarray, floor_db: float, max_db: Optional[float] = None) -> np.ndarray:
    """Linear map [floor_db, max_db] -> [0, 255], lowest frequency on the bottom row."""
    values = np.asarray(values, dtype=float)
    top = float(values.max()) if max_db is None else max_db
    span = top - floor_db if top > floor_db else 1.0
    gray = np.clip((values - floor_db) / span, 0.0, 1.0) * 255.0
    return np.round(gray[::-1]).astype(np.uint8)


def write_pgm(path: PathLike, values: np.ndarray, floor_db: float, max_db: Optional[float] = None) -> Path:
    gray = spectrogram_to_gray(values, floor_db, max_db)
    height, width = gray.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    path = _require(path)
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ArtifactMismatchError(f"{path} is not a binary PGM file.")
    width, height = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos + 1: pos + 1 + width * height], dtype=np.uint8)
    return pixels.reshape(height, width)


# ---------------------------------------------------------------- CSV reports

def write_rows(path: PathLike, fieldnames: Sequence[str], rows: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_rows(path: PathLike) -> List[Dict[str, str]]:
    path = _require(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def save_figure(path: PathLike, clean: np.ndarray, perturbed: np.ndarray, floor_db: float,
                interferer: Optional[np.ndarray] = None, intruder: Optional[np.ndarray] = None,
                freqs_hz: Optional[np.ndarray] = None, title: str = "") -> Optional[Path]:
    """Clean / perturbed spectrograms side by side (plus waveforms) as a PNG; None without matplotlib."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping PNG figure.")
        return None

    n_panels = 3 if interferer is not None else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(5 * n_panels, 4))
    vmax = max(float(clean.max()), float(perturbed.max()))
    extent = None
    if freqs_hz is not None:
        extent = [0, clean.shape[1], float(freqs_hz[0]), float(freqs_hz[-1])]
    for ax, values, label in ((axes[0], clean, "clean"), (axes[1], perturbed, "with interferer")):
        im = ax.imshow(values, origin="lower", aspect="auto", vmin=floor_db, vmax=vmax, extent=extent)
        ax.set_title(label)
        ax.set_xlabel("window")
        ax.set_ylabel("frequency (Hz)" if freqs_hz is not None else "frequency row")
    fig.colorbar(im, ax=axes[1], label="dB")
    if interferer is not None:
        axes[2].plot(interferer, label="interferer f", linewidth=0.8)
        if intruder is not None:
            axes[2].plot(intruder, label="intruder g", linewidth=0.8, alpha=0.6)
        axes[2].set_xlabel("step")
        axes[2].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
