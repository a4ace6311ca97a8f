import concurrent.futures
import hashlib
import logging
import os
import tempfile
import typing

logger = logging.getLogger("rbsr.utils")

T = typing.TypeVar("T")
R = typing.TypeVar("R")


class RbsrException(Exception):
    """Base class of every error the toolkit reports to the command line."""


class Runtime:
    """
    Process-wide execution settings. Modules that can split work (kernel grids,
    tiles, metric pairs) ask for a worker count here; deterministic mode pins it
    to one worker.
    """

    threads: int = 1
    deterministic: bool = False

    @classmethod
    def configure(cls, threads: int = 1, deterministic: bool = False):
        cls.threads = max(1, int(threads))
        cls.deterministic = deterministic
        logger.debug(f"Runtime configured threads={cls.threads} deterministic={deterministic}")

    @classmethod
    def workers(cls) -> int:
        return 1 if cls.deterministic else cls.threads


def parallel_map(func: typing.Callable[[T], R], items: typing.Sequence[T]) -> typing.List[R]:
    """
    Map `func` over `items`, possibly on a thread pool. Results keep input order.
    """
    workers = Runtime.workers()
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def atomic_write_bytes(path: str, data: bytes):
    """
    Write `data` to a temporary file next to `path` and rename it into place.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".rbsr_", dir=directory)
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
