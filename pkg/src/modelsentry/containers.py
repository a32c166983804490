"""Read-only parsers for the containers that wrap model files.

Two formats are recognized: ZIP archives (PyTorch-style checkpoints and
Keras archive files) read via their central directory, and HDF5 files whose
embedded model-config JSON is recovered by a bounded byte-level heuristic
rather than a full B-tree walk.

Nothing here writes, extracts to disk, or resolves member paths against the
filesystem.  Decompression is capped so that a hostile archive cannot
balloon memory.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO

from .disasm import plausible_pickle_prefix

ZIP_LOCAL_MAGIC = b"PK\x03\x04"
ZIP_EOCD_MAGIC = b"PK\x05\x06"
ZIP_CENTRAL_MAGIC = b"PK\x01\x02"
ZIP64_EOCD_MAGIC = b"PK\x06\x06"
ZIP64_LOCATOR_MAGIC = b"PK\x06\x07"
HDF5_SIGNATURE = b"\x89HDF\r\n\x1a\n"

EOCD_SEARCH_WINDOW = 66 * 1024
DEFAULT_ENTRY_CAP = 256 * 1024 * 1024
H5_CONFIG_CAP = 64 * 1024 * 1024
_H5_GAP_CAP = 64 * 1024
_CD_SIZE_CAP = 512 * 1024 * 1024
_CHUNK = 4 * 1024 * 1024


class FormatError(Exception):
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    @property
    def kind(self) -> str:
        return type(self).__name__


class NoCentralDirectory(FormatError):
    def __init__(self):
        super().__init__("no ZIP end-of-central-directory record found")


class CorruptHeader(FormatError):
    def __init__(self, offset: int, detail: str):
        super().__init__(f"corrupt header at offset {offset}: {detail}")
        self.offset = offset


class UnsupportedMethod(FormatError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"entry {path!r}: {detail}")
        self.path = path


class SizeMismatch(FormatError):
    def __init__(self, path: str, declared: int, actual: int):
        super().__init__(f"entry {path!r}: declared {declared} bytes, got {actual}")
        self.declared = declared
        self.actual = actual


class InflateError(FormatError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"entry {path!r}: inflate failed: {detail}")
        self.path = path


class CapExceeded(FormatError):
    def __init__(self, declared: int, cap: int):
        super().__init__(f"declared size {declared} exceeds cap {cap}")
        self.declared = declared
        self.cap = cap


class NotHdf5(FormatError):
    def __init__(self):
        super().__init__("file does not start with the HDF5 signature")


class ConfigNotFound(FormatError):
    def __init__(self):
        super().__init__("no model_config attribute found")


class UnbalancedJson(FormatError):
    def __init__(self, start_offset: int, detail: str = "unbalanced JSON object"):
        super().__init__(f"{detail} starting at offset {start_offset}")
        self.start_offset = start_offset


@dataclass(frozen=True)
class ArchiveEntry:
    """One central-directory entry, as declared (paths are data, not fs)."""

    path: str
    compressed_size: int
    uncompressed_size: int
    method: str  # "stored", "deflate", or "unsupported(N)"
    offset: int  # byte position of the local header
    encrypted: bool = False
    suspicious_path: bool = False


@dataclass(frozen=True)
class ExtractedConfig:
    source: str  # "hdf5-attribute-heuristic" or "zip-entry"
    json_text: str
    byte_range: tuple[int, int]


def is_path_suspicious(path: str) -> bool:
    """Absolute roots, drive letters, or ``..`` segments in an archive name."""
    if not path:
        return True
    if path.startswith(("/", "\\")):
        return True
    if len(path) >= 2 and path[1] == ":" and path[0].isalpha():
        return True
    segments = path.replace("\\", "/").split("/")
    return ".." in segments


def _file_size(handle: BinaryIO) -> int:
    handle.seek(0, io.SEEK_END)
    return handle.tell()


def _find_eocd(handle: BinaryIO, size: int) -> tuple[int, bytes]:
    window = min(size, EOCD_SEARCH_WINDOW)
    handle.seek(size - window)
    tail = handle.read(window)
    at = tail.rfind(ZIP_EOCD_MAGIC)
    while at >= 0:
        if at + 22 <= len(tail):
            return size - window + at, tail[at : at + 22]
        at = tail.rfind(ZIP_EOCD_MAGIC, 0, at)
    raise NoCentralDirectory()


def _read_zip64_sizes(handle: BinaryIO, eocd_offset: int) -> tuple[int, int, int] | None:
    """Return (entry_count, cd_size, cd_offset) from the ZIP64 records, if present."""
    locator_at = eocd_offset - 20
    if locator_at < 0:
        return None
    handle.seek(locator_at)
    locator = handle.read(20)
    if locator[:4] != ZIP64_LOCATOR_MAGIC:
        return None
    (zip64_eocd_offset,) = struct.unpack("<Q", locator[8:16])
    handle.seek(zip64_eocd_offset)
    record = handle.read(56)
    if record[:4] != ZIP64_EOCD_MAGIC:
        raise CorruptHeader(zip64_eocd_offset, "bad ZIP64 end-of-central-directory signature")
    total_entries, cd_size, cd_offset = struct.unpack("<QQQ", record[32:56])
    return total_entries, cd_size, cd_offset


def _zip64_extra(extra: bytes, needed: list[str], values: dict[str, int]) -> dict[str, int]:
    """Patch 0xFFFFFFFF/0xFFFF placeholders from the ZIP64 extra field."""
    pos = 0
    while pos + 4 <= len(extra):
        header_id, data_size = struct.unpack("<HH", extra[pos : pos + 4])
        data = extra[pos + 4 : pos + 4 + data_size]
        if header_id == 0x0001:
            cursor = 0
            for field_name in needed:
                if cursor + 8 > len(data):
                    break
                values[field_name] = struct.unpack("<Q", data[cursor : cursor + 8])[0]
                cursor += 8
            break
        pos += 4 + data_size
    return values


def list_entries(handle: BinaryIO, cap_entries: int = 1_000_000) -> list[ArchiveEntry]:
    """Read the central directory; order preserved, nothing decompressed."""
    size = _file_size(handle)
    if size < 22:
        raise NoCentralDirectory()
    eocd_offset, eocd = _find_eocd(handle, size)
    total_entries, cd_size, cd_offset = struct.unpack("<HII", eocd[10:20])
    if total_entries == 0xFFFF or cd_size == 0xFFFFFFFF or cd_offset == 0xFFFFFFFF:
        zip64 = _read_zip64_sizes(handle, eocd_offset)
        if zip64 is not None:
            total_entries, cd_size, cd_offset = zip64
    if cd_size > _CD_SIZE_CAP:
        raise CorruptHeader(cd_offset, f"central directory size {cd_size} too large")
    if total_entries > cap_entries:
        raise CorruptHeader(cd_offset, f"entry count {total_entries} too large")
    handle.seek(cd_offset)
    directory = handle.read(cd_size)
    entries: list[ArchiveEntry] = []
    pos = 0
    for _ in range(total_entries):
        if pos + 46 > len(directory):
            raise CorruptHeader(cd_offset + pos, "central directory truncated")
        header = directory[pos : pos + 46]
        if header[:4] != ZIP_CENTRAL_MAGIC:
            raise CorruptHeader(cd_offset + pos, "bad central file header signature")
        flags, method_code = struct.unpack("<HH", header[8:12])
        comp_size, uncomp_size = struct.unpack("<II", header[20:28])
        name_len, extra_len, comment_len = struct.unpack("<HHH", header[28:34])
        (local_offset,) = struct.unpack("<I", header[42:46])
        name_raw = directory[pos + 46 : pos + 46 + name_len]
        extra = directory[pos + 46 + name_len : pos + 46 + name_len + extra_len]
        pos += 46 + name_len + extra_len + comment_len
        encoding = "utf-8" if flags & 0x800 else "cp437"
        path = name_raw.decode(encoding, "replace")
        sizes = {
            "uncompressed_size": uncomp_size,
            "compressed_size": comp_size,
            "local_offset": local_offset,
        }
        needed = []
        if uncomp_size == 0xFFFFFFFF:
            needed.append("uncompressed_size")
        if comp_size == 0xFFFFFFFF:
            needed.append("compressed_size")
        if local_offset == 0xFFFFFFFF:
            needed.append("local_offset")
        if needed:
            sizes = _zip64_extra(extra, needed, sizes)
        if method_code == 0:
            method = "stored"
        elif method_code == 8:
            method = "deflate"
        else:
            method = f"unsupported({method_code})"
        entries.append(
            ArchiveEntry(
                path=path,
                compressed_size=sizes["compressed_size"],
                uncompressed_size=sizes["uncompressed_size"],
                method=method,
                offset=sizes["local_offset"],
                encrypted=bool(flags & 0x1),
                suspicious_path=is_path_suspicious(path),
            )
        )
    return entries


def _entry_data_start(handle: BinaryIO, entry: ArchiveEntry) -> int:
    handle.seek(entry.offset)
    local = handle.read(30)
    if len(local) != 30 or local[:4] != ZIP_LOCAL_MAGIC:
        raise CorruptHeader(entry.offset, "bad local file header signature")
    name_len, extra_len = struct.unpack("<HH", local[26:30])
    return entry.offset + 30 + name_len + extra_len


def read_entry(handle: BinaryIO, entry: ArchiveEntry, cap: int = DEFAULT_ENTRY_CAP) -> bytes:
    """Return exactly the entry's declared bytes, bounded by ``cap``."""
    if entry.encrypted:
        raise UnsupportedMethod(entry.path, "encrypted entry")
    if entry.method not in ("stored", "deflate"):
        raise UnsupportedMethod(entry.path, f"compression {entry.method}")
    if entry.uncompressed_size > cap:
        raise CapExceeded(entry.uncompressed_size, cap)
    data_start = _entry_data_start(handle, entry)
    handle.seek(data_start)
    if entry.method == "stored":
        data = handle.read(entry.uncompressed_size)
        if len(data) != entry.uncompressed_size:
            raise SizeMismatch(entry.path, entry.uncompressed_size, len(data))
        return data
    decompressor = zlib.decompressobj(-15)
    remaining = entry.compressed_size
    chunks: list[bytes] = []
    produced = 0
    try:
        while remaining > 0:
            piece = handle.read(min(remaining, 64 * 1024))
            if not piece:
                break
            remaining -= len(piece)
            pending = piece
            while pending:
                out = decompressor.decompress(pending, 1 << 20)
                if out:
                    produced += len(out)
                    if produced > cap:
                        raise CapExceeded(produced, cap)
                    chunks.append(out)
                pending = decompressor.unconsumed_tail
                if not out and not pending:
                    break
        tail = decompressor.flush()
    except zlib.error as exc:
        raise InflateError(entry.path, str(exc)) from None
    produced += len(tail)
    if produced > cap:
        raise CapExceeded(produced, cap)
    chunks.append(tail)
    data = b"".join(chunks)
    if len(data) != entry.uncompressed_size:
        raise SizeMismatch(entry.path, entry.uncompressed_size, len(data))
    return data


def read_entry_head(handle: BinaryIO, entry: ArchiveEntry, n: int) -> bytes:
    """Best-effort first ``n`` decompressed bytes, for content sniffing."""
    try:
        data_start = _entry_data_start(handle, entry)
    except FormatError:
        return b""
    handle.seek(data_start)
    if entry.method == "stored":
        return handle.read(min(n, entry.uncompressed_size))
    if entry.method != "deflate" or entry.encrypted:
        return b""
    decompressor = zlib.decompressobj(-15)
    remaining = entry.compressed_size
    out = b""
    try:
        while remaining > 0 and len(out) < n:
            piece = handle.read(min(remaining, 64 * 1024))
            if not piece:
                break
            remaining -= len(piece)
            out += decompressor.decompress(piece, n - len(out))
    except zlib.error:
        return b""
    return out[:n]


def find_pickle_payloads(
    entries: list[ArchiveEntry],
    handle: BinaryIO,
    cap: int = DEFAULT_ENTRY_CAP,
    errors: list[FormatError] | None = None,
) -> list[tuple[ArchiveEntry, bytes]]:
    """Locate every entry a deserializing loader would feed to pickle.

    Selection: a ``.pkl`` path suffix, or content that plausibly starts a
    pickle stream.  Per-entry read failures are appended to ``errors`` (when
    given) without aborting the remaining entries.
    """
    hits: list[tuple[ArchiveEntry, bytes]] = []
    for entry in entries:
        if entry.path.endswith("/"):
            continue
        by_extension = entry.path.endswith(".pkl")
        if not by_extension:
            if entry.uncompressed_size == 0:
                continue
            head = read_entry_head(handle, entry, 512)
            complete = entry.uncompressed_size <= 512
            if not plausible_pickle_prefix(head, complete=complete):
                continue
        try:
            hits.append((entry, read_entry(handle, entry, cap)))
        except FormatError as exc:
            if errors is not None:
                errors.append(exc)
    return hits


def _scan_for(handle: BinaryIO, marker: bytes, start: int, end: int | None = None) -> int:
    """Chunked search for ``marker`` in [start, end); -1 when absent."""
    size = _file_size(handle)
    stop = size if end is None else min(end, size)
    overlap = len(marker) - 1
    pos = start
    carry = b""
    while pos < stop:
        handle.seek(pos)
        chunk = handle.read(min(_CHUNK, stop - pos))
        if not chunk:
            break
        buffer = carry + chunk
        found = buffer.find(marker)
        if found >= 0:
            return pos - len(carry) + found
        carry = buffer[-overlap:] if overlap else b""
        pos += len(chunk)
    return -1


def extract_h5_model_config(handle: BinaryIO) -> ExtractedConfig:
    """Recover the model-config JSON from an HDF5 file, heuristically.

    Scans for the attribute name bytes ``model_config`` and extracts the
    first balanced JSON object that follows (brace counting that respects
    JSON string escaping), capped at 64 MiB.  This sidesteps a full HDF5
    object-header parse; files written by the mainstream saver place the
    config exactly this way.
    """
    handle.seek(0)
    if handle.read(8) != HDF5_SIGNATURE:
        raise NotHdf5()
    marker_at = _scan_for(handle, b"model_config", 8)
    if marker_at < 0:
        raise ConfigNotFound()
    search_start = marker_at + len(b"model_config")
    brace_at = _scan_for(handle, b"{", search_start, search_start + _H5_GAP_CAP)
    if brace_at < 0:
        raise ConfigNotFound()
    handle.seek(brace_at)
    depth = 0
    in_string = False
    escaped = False
    collected = bytearray()
    done = False
    while not done:
        chunk = handle.read(_CHUNK)
        if not chunk:
            raise UnbalancedJson(brace_at, "end of file inside JSON object")
        for byte in chunk:
            collected.append(byte)
            if len(collected) > H5_CONFIG_CAP:
                raise CapExceeded(len(collected), H5_CONFIG_CAP)
            if in_string:
                if escaped:
                    escaped = False
                elif byte == 0x5C:  # backslash
                    escaped = True
                elif byte == 0x22:  # double quote
                    in_string = False
                continue
            if byte == 0x22:
                in_string = True
            elif byte == 0x7B:  # {
                depth += 1
            elif byte == 0x7D:  # }
                depth -= 1
                if depth == 0:
                    done = True
                    break
    try:
        json_text = bytes(collected).decode("utf-8")
        json.loads(json_text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnbalancedJson(brace_at, f"extracted text is not valid JSON: {exc}") from None
    return ExtractedConfig(
        source="hdf5-attribute-heuristic",
        json_text=json_text,
        byte_range=(brace_at, brace_at + len(collected)),
    )
