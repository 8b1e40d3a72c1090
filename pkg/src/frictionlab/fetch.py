"""Download and validate the four MNIST IDX files into a local cache."""

from __future__ import annotations

import gzip
import io
import logging
import os
import tarfile
import urllib.request
from pathlib import Path

from .envs import MNIST_FILES, IdxError, parse_idx

log = logging.getLogger(__name__)

FILE_SIZES = {
    "train-images-idx3-ubyte": 47040016,
    "train-labels-idx1-ubyte": 60008,
    "t10k-images-idx3-ubyte": 7840016,
    "t10k-labels-idx1-ubyte": 10008,
}
# per-file gzip mirrors; the npm tarball bundles all four uncompressed
GZ_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
TARBALL_MIRROR = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"


class FetchError(RuntimeError):
    pass


def default_cache_dir() -> Path:
    env = os.environ.get("DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "frictionlab" / "mnist"


def _kind(name: str) -> str:
    return "images" if "images" in name else "labels"


def validate_file(path: Path, name: str | None = None) -> None:
    """Size, magic and shape check; raises ``IdxError`` subclasses or ``FetchError``."""
    name = name or path.name
    blob = path.read_bytes()
    if len(blob) != FILE_SIZES[name]:
        raise FetchError(f"{name}: {len(blob)} bytes, expected {FILE_SIZES[name]}")
    parse_idx(blob, _kind(name))


def _quarantine(path: Path) -> Path:
    bad = path.with_name(path.name + ".corrupt")
    path.replace(bad)
    log.warning("quarantined corrupted %s -> %s", path.name, bad.name)
    return bad


def _http_get(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def _from_gz_mirror(base: str, missing: list[str], timeout: float) -> dict[str, bytes]:
    return {name: gzip.decompress(_http_get(base + name + ".gz", timeout)) for name in missing}


def _from_tarball(url: str, missing: list[str], timeout: float) -> dict[str, bytes]:
    out = {}
    with tarfile.open(fileobj=io.BytesIO(_http_get(url, timeout)), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = Path(member.name).name
            if name in missing:
                out[name] = tar.extractfile(member).read()
    return out


def fetch_mnist(cache_dir=None, mirror: str | None = None, offline: bool = False,
                timeout: float = 60.0) -> Path:
    """Make sure all four IDX files are present and valid in ``cache_dir``.

    Valid cached files are never re-downloaded. A cached file that fails
    validation is renamed to ``*.corrupt`` and the error is raised; the next
    call fetches a fresh copy.
    """
    cache = Path(cache_dir) if cache_dir else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    missing = []
    for name in MNIST_FILES.values():
        path = cache / name
        if not path.exists():
            missing.append(name)
            continue
        try:
            validate_file(path)
        except (IdxError, FetchError) as exc:
            _quarantine(path)
            raise type(exc)(f"cached {name} is corrupted and was quarantined: {exc}") from exc
    if not missing:
        return cache
    if offline:
        raise FetchError(f"offline mode and {len(missing)} MNIST file(s) missing from {cache}")

    sources = [mirror] if mirror else [*GZ_MIRRORS, TARBALL_MIRROR]
    errors = []
    for src in sources:
        try:
            if src.endswith((".tgz", ".tar.gz")):
                blobs = _from_tarball(src, missing, timeout)
            else:
                blobs = _from_gz_mirror(src if src.endswith("/") else src + "/", missing, timeout)
        except (OSError, EOFError, tarfile.TarError) as exc:
            errors.append(f"{src}: {exc}")
            log.info("mirror %s failed: %s", src, exc)
            continue
        for name in missing:
            if name not in blobs:
                break
            tmp = cache / (name + ".part")
            tmp.write_bytes(blobs[name])
            try:
                validate_file(tmp, name)
            except (IdxError, FetchError):
                tmp.unlink()
                raise
            tmp.replace(cache / name)
        else:
            return cache
        errors.append(f"{src}: incomplete")
    raise FetchError("could not fetch MNIST from any mirror:\n  " + "\n  ".join(errors))

