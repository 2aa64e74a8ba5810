"""
Artifact Exporters

Reads and writes the on-disk artifacts of a run:
- QDIFFCF1 binary fields (complex or signed real samples on an N x N grid)
- 8-bit PGM previews with a `.range.txt` sidecar recording the value range
- CSV tables (spectra, mode labels, coupling matrices, metrics)
- manifest.csv with the size and sha256 of every artifact

Floats are written with repr(), so CSV round trips are exact.
"""

import csv
import hashlib
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import netpbmfile
import numpy as np

from app.services.grid import SpaceTag
from app.utils.errors import MalformedArtifactError, MissingArtifactError

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"QDIFFCF1"
FIELD_HEADER = struct.Struct("<8sII")
MANIFEST_NAME = "manifest.csv"
PGM_MAX = 255


def _payload_dtype(tag: SpaceTag) -> np.dtype:
    return np.dtype("<f8") if tag == SpaceTag.REAL_IMAGE else np.dtype("<c16")


def write_field(path: Path, values: np.ndarray, tag: SpaceTag) -> Path:
    """
    Write one N x N field as QDIFFCF1.

    Layout: 8-byte magic, u32 N, u32 space tag (little-endian), then N*N
    row-major samples ('<c16', or '<f8' for REAL_IMAGE).

    Args:
        path: Target file
        values: (N, N) samples
        tag: Space tag of the samples

    Returns:
        The written path
    """
    tag = SpaceTag(tag)
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"Field must be square, got shape {values.shape}")
    if tag == SpaceTag.REAL_IMAGE and np.iscomplexobj(values) and np.any(values.imag):
        raise ValueError("REAL_IMAGE fields must be real")
    payload = np.real(values) if tag == SpaceTag.REAL_IMAGE else values
    payload = np.ascontiguousarray(payload, dtype=_payload_dtype(tag))

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FIELD_HEADER.pack(FIELD_MAGIC, values.shape[0], int(tag)))
        fh.write(payload.tobytes())
    return path


def read_field(path: Path) -> Tuple[np.ndarray, SpaceTag]:
    """
    Read a QDIFFCF1 field.

    Returns:
        (values, tag); complex128 values, or float64 for REAL_IMAGE

    Raises:
        MissingArtifactError: If the file does not exist
        MalformedArtifactError: On bad magic, unknown tag or truncated payload
    """
    if not path.is_file():
        raise MissingArtifactError(f"Field file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < FIELD_HEADER.size:
        raise MalformedArtifactError(f"{path}: file shorter than header")
    magic, n, tag_code = FIELD_HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise MalformedArtifactError(f"{path}: bad magic {magic!r}")
    try:
        tag = SpaceTag(tag_code)
    except ValueError:
        raise MalformedArtifactError(f"{path}: unknown space tag {tag_code}") from None

    dtype = _payload_dtype(tag)
    expected = n * n * dtype.itemsize
    body = raw[FIELD_HEADER.size :]
    if len(body) != expected:
        raise MalformedArtifactError(
            f"{path}: payload is {len(body)} bytes, expected {expected} for N={n}"
        )
    values = np.frombuffer(body, dtype=dtype).reshape(n, n)
    native = np.float64 if tag == SpaceTag.REAL_IMAGE else np.complex128
    return values.astype(native), tag


def write_pgm(
    path: Path, image: np.ndarray, value_range: Optional[Tuple[float, float]] = None
) -> Tuple[float, float]:
    """
    Write an 8-bit binary PGM preview plus `<name>.range.txt`.

    Row 0 of the file is the top of the picture (largest y), so the array
    is flipped vertically before writing.

    Args:
        path: Target .pgm file
        image: Real (N, N) array indexed [y, x]
        value_range: (low, high) mapped to gray 0 and 255; defaults to min/max

    Returns:
        The (low, high) range used
    """
    image = np.asarray(image, dtype=np.float64)
    if value_range is None:
        value_range = (float(image.min()), float(image.max()))
    low, high = value_range
    if high > low:
        scaled = np.clip((image - low) / (high - low), 0.0, 1.0) * PGM_MAX
    else:
        scaled = np.zeros_like(image)
    write_gray(path, np.rint(scaled).astype(np.uint8))
    range_path(path).write_text(f"{low!r} {high!r}\n")
    return low, high


def write_gray(path: Path, gray: np.ndarray, max_value: int = PGM_MAX) -> Path:
    """
    Write integer gray levels indexed [y, x] (row 0 at the bottom) as a binary PGM.

    Args:
        path: Target .pgm file
        gray: Gray levels in [0, max_value]
        max_value: PGM maxval (255 for 8-bit, up to 65535 for 16-bit)
    """
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.min() < 0 or gray.max() > max_value:
        raise ValueError(f"Gray levels must be a 2-D array within [0, {max_value}]")
    dtype = np.uint8 if max_value <= PGM_MAX else np.uint16
    path.parent.mkdir(parents=True, exist_ok=True)
    netpbmfile.imwrite(path, np.flipud(gray).astype(dtype), maxval=max_value, magicnumber="P5")
    return path


def range_path(pgm_path: Path) -> Path:
    return pgm_path.with_name(pgm_path.stem + ".range.txt")


def read_pgm(path: Path) -> Tuple[np.ndarray, int]:
    """
    Read a grayscale PGM (P2 or P5, 8 or 16 bit).

    Returns:
        (gray levels indexed [y, x] with row 0 at the bottom, maxval)

    Raises:
        MissingArtifactError: If the file does not exist
        MalformedArtifactError: If the file is not a single-channel PGM
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Image not found: {path}")
    try:
        with netpbmfile.NetpbmFile(path) as pgm:
            magic = pgm.magicnumber
            max_value = int(pgm.maxval)
            data = pgm.asarray()
    except (ValueError, OSError) as e:
        raise MalformedArtifactError(f"{path}: unreadable PGM ({e})") from e
    if magic not in ("P2", "P5") or data.ndim != 2:
        raise MalformedArtifactError(f"{path}: expected a grayscale P2/P5 image, got {magic}")
    if max_value <= 0:
        raise MalformedArtifactError(f"{path}: maxval must be positive")
    return np.flipud(data).astype(np.int64), max_value


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    comment: Optional[str] = None,
) -> Path:
    """
    Write a CSV table; floats use repr so they read back bit-exactly.

    Args:
        path: Target file
        header: Column names
        rows: Row values
        comment: Optional leading `# ...` line
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path: Path) -> Tuple[List[Dict[str, str]], List[str]]:
    """
    Read a CSV table written by write_csv.

    Returns:
        (rows as dicts, leading comment lines without the `# ` prefix)

    Raises:
        MissingArtifactError: If the file does not exist
    """
    if not path.is_file():
        raise MissingArtifactError(f"Table not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    comments = [line[1:].strip() for line in lines if line.startswith("#")]
    body = [line for line in lines if not line.startswith("#")]
    return list(csv.DictReader(body)), comments


def write_spectrum(path: Path, weights: np.ndarray, labels: Sequence[Tuple[int, ...]]) -> Path:
    """Schmidt spectrum: one row per mode with its label (indices joined by ':') and weight."""
    rows = (
        (k, ":".join(str(i) for i in label), float(w))
        for k, (label, w) in enumerate(zip(labels, weights))
    )
    return write_csv(path, ("index", "label", "lambda"), rows)


def read_spectrum(path: Path) -> Tuple[np.ndarray, List[Tuple[int, ...]]]:
    """Inverse of write_spectrum."""
    rows, _ = read_csv(path)
    try:
        weights = np.array([float(r["lambda"]) for r in rows])
        labels = [tuple(int(i) for i in r["label"].split(":")) for r in rows]
    except (KeyError, ValueError) as e:
        raise MalformedArtifactError(f"{path}: malformed spectrum table ({e})") from e
    return weights, labels


def write_matrix(path: Path, matrix: np.ndarray, basis: str) -> Path:
    """Dense complex matrix in long form (n, m, re, im) under a `# basis:` line."""
    matrix = np.asarray(matrix, dtype=np.complex128)
    rows = (
        (n, m, float(matrix[n, m].real), float(matrix[n, m].imag))
        for n in range(matrix.shape[0])
        for m in range(matrix.shape[1])
    )
    return write_csv(path, ("n", "m", "re", "im"), rows, comment=f"basis: {basis}")


def read_matrix(path: Path) -> Tuple[np.ndarray, str]:
    """
    Inverse of write_matrix.

    Returns:
        (matrix, basis manifest)

    Raises:
        MalformedArtifactError: If entries or the basis line are missing or unparsable
    """
    rows, comments = read_csv(path)
    basis = next((c[len("basis:") :].strip() for c in comments if c.startswith("basis:")), None)
    if basis is None:
        raise MalformedArtifactError(f"{path}: matrix table lacks a '# basis:' line")
    try:
        size = 1 + max(int(r["n"]) for r in rows)
        matrix = np.full((size, size), np.nan + 0j, dtype=np.complex128)
        for r in rows:
            matrix[int(r["n"]), int(r["m"])] = complex(float(r["re"]), float(r["im"]))
    except (KeyError, ValueError) as e:
        raise MalformedArtifactError(f"{path}: malformed matrix table ({e})") from e
    if np.isnan(matrix.real).any():
        raise MalformedArtifactError(f"{path}: matrix table has missing entries")
    return matrix, basis


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(root: Path, exclude: Sequence[str] = ()) -> Path:
    """
    List every artifact under root with its size and sha256.

    Args:
        root: Output directory
        exclude: File names to leave out (besides the manifest itself)

    Returns:
        Path of manifest.csv
    """
    skip = {MANIFEST_NAME, *exclude}
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in skip)
    rows = [(p.relative_to(root).as_posix(), p.stat().st_size, sha256_file(p)) for p in files]
    logger.debug(f"Manifest lists {len(rows)} artifacts under {root}")
    return write_csv(root / MANIFEST_NAME, ("path", "bytes", "sha256"), rows)


class StageWriter:
    """
    Writes the artifacts of one pipeline stage into its own directory and
    records what was written.
    """

    def __init__(self, directory: Path):
        """
        Initialize stage writer.

        Args:
            directory: Stage output directory (created on demand)
        """
        self.directory = directory
        self.written: List[Path] = []

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def field(self, name: str, values: np.ndarray, tag: SpaceTag) -> Path:
        return self._record(write_field(self.directory / name, values, tag))

    def image(
        self,
        stem: str,
        values: np.ndarray,
        value_range: Optional[Tuple[float, float]] = None,
        with_field: bool = True,
    ) -> Path:
        """Signed real image as `<stem>.bin` (optional) plus `<stem>.pgm` preview."""
        if with_field:
            self.field(f"{stem}.bin", values, SpaceTag.REAL_IMAGE)
        pgm = self.directory / f"{stem}.pgm"
        write_pgm(pgm, values, value_range)
        self._record(range_path(pgm))
        return self._record(pgm)

    def table(
        self,
        name: str,
        header: Sequence[str],
        rows: Iterable[Sequence[Any]],
        comment: Optional[str] = None,
    ) -> Path:
        return self._record(write_csv(self.directory / name, header, rows, comment))

    def matrix(self, name: str, matrix: np.ndarray, basis: str) -> Path:
        return self._record(write_matrix(self.directory / name, matrix, basis))

    def spectrum(self, name: str, weights: np.ndarray, labels: Sequence[Tuple[int, ...]]) -> Path:
        return self._record(write_spectrum(self.directory / name, weights, labels))

    def text(self, name: str, content: str) -> Path:
        path = self.directory / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
        return self._record(path)
