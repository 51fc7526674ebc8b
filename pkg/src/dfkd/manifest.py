"""Run manifests, FNV-1a digests, and key=value config files.

Every CLI command records what it read, what it wrote, and the exact settings
used, as a flat key=value manifest. Digests are 64-bit FNV-1a so they are
cheap, dependency-free, and easy to recompute anywhere. Timestamps are stored
but excluded from the manifest's identity digest, so a faithful replay can be
compared on content alone.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK = (1 << 64) - 1


def _fnv_update_py(h: int, buf) -> int:
    for byte in buf:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


try:  # numba makes the hash usable on multi-hundred-MB tensors
    import numba

    @numba.njit(cache=True)
    def _fnv_update_nb(h, buf):  # pragma: no cover - exercised via fnv tests
        prime = numba.uint64(1099511628211)
        for i in range(buf.size):
            h = (h ^ numba.uint64(buf[i])) * prime
        return h

    def _fnv_update(h: int, buf: np.ndarray) -> int:
        return int(_fnv_update_nb(np.uint64(h), buf))
except ImportError:  # pragma: no cover
    def _fnv_update(h: int, buf: np.ndarray) -> int:
        return _fnv_update_py(h, buf.tobytes())


class Fnv64:
    """Streaming 64-bit FNV-1a."""

    def __init__(self):
        self._h = FNV_OFFSET

    def update(self, data) -> "Fnv64":
        if isinstance(data, np.ndarray):
            buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
        else:
            buf = np.frombuffer(bytes(data), dtype=np.uint8)
        if buf.size:
            self._h = _fnv_update(self._h, buf)
        return self

    def digest(self) -> int:
        return self._h

    def hexdigest(self) -> str:
        return f"{self._h:016x}"


def fnv1a_64(data) -> int:
    return Fnv64().update(data).digest()


def file_digest(path, chunk_size: int = 1 << 22) -> str:
    h = Fnv64()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def parse_kv_text(text: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def parse_kv_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def _check_kv(key: str, value: str):
    if "=" in key or "\n" in key or not key:
        raise ValueError(f"bad manifest key {key!r}")
    if "\n" in value:
        raise ValueError(f"manifest value for {key!r} must be a single line")


@dataclass
class RunManifest:
    """What a command ran with: settings, input digests, output digests."""

    command: str
    config: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, tuple[str, str]] = field(default_factory=dict)   # name -> (path, digest)
    outputs: dict[str, tuple[str, str]] = field(default_factory=dict)  # name -> (path, digest)
    started: str = ""
    finished: str = ""
    tool_version: str = ""

    def set_config(self, key: str, value) -> None:
        self.config[str(key)] = str(value)

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = (os.path.abspath(os.fspath(path)), file_digest(path))

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = (os.path.abspath(os.fspath(path)), file_digest(path))

    def stamp_start(self) -> None:
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def stamp_finish(self) -> None:
        self.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def _lines(self, with_times: bool) -> list[str]:
        lines = [
            "manifest_version=1",
            f"tool_version={self.tool_version}",
            f"command={self.command}",
        ]
        if with_times:
            lines.append(f"started={self.started}")
            lines.append(f"finished={self.finished}")
        for key in sorted(self.config):
            _check_kv(f"config.{key}", self.config[key])
            lines.append(f"config.{key}={self.config[key]}")
        for section, table in (("input", self.inputs), ("output", self.outputs)):
            for name in sorted(table):
                path, digest = table[name]
                _check_kv(f"{section}.{name}.path", path)
                lines.append(f"{section}.{name}.path={path}")
                lines.append(f"{section}.{name}.fnv64={digest}")
        return lines

    def identity_text(self) -> str:
        """Everything except wall-clock timestamps; the replay comparison basis."""
        return "\n".join(self._lines(with_times=False)) + "\n"

    def identity_digest(self) -> str:
        return Fnv64().update(self.identity_text().encode()).hexdigest()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self._lines(with_times=True)) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        kv = parse_kv_file(path)
        if kv.get("manifest_version") != "1":
            raise ValueError(f"unsupported manifest version {kv.get('manifest_version')!r}")
        m = cls(command=kv.get("command", ""))
        m.tool_version = kv.get("tool_version", "")
        m.started = kv.get("started", "")
        m.finished = kv.get("finished", "")
        names_in, names_out = set(), set()
        for key, value in kv.items():
            if key.startswith("config."):
                m.config[key[len("config."):]] = value
            elif key.startswith("input."):
                names_in.add(key[len("input."):].rsplit(".", 1)[0])
            elif key.startswith("output."):
                names_out.add(key[len("output."):].rsplit(".", 1)[0])
        for name in names_in:
            m.inputs[name] = (kv[f"input.{name}.path"], kv[f"input.{name}.fnv64"])
        for name in names_out:
            m.outputs[name] = (kv[f"output.{name}.path"], kv[f"output.{name}.fnv64"])
        return m
