"""A live `attnctl serve` session over a child process's stdio.

The kernel binary is found via the ATTNCTL_KERNEL environment variable (a
command line, split shell-style), falling back to `attnctl` on PATH.  One
client per pipeline; calls are strictly serialized, one response per request.
"""

from __future__ import annotations

import os
import shlex
import subprocess

from . import catp
from .errors import ConnectionLost

KERNEL_ENV = "ATTNCTL_KERNEL"


def kernel_command() -> list[str]:
    return shlex.split(os.environ.get(KERNEL_ENV, "attnctl")) + ["serve"]


class KernelClient:
    def __init__(self, command: list[str] | None = None):
        self._proc = subprocess.Popen(
            command or kernel_command(),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )

    def call(self, request_payload: bytes) -> bytes:
        """Ship one frame, block for the matching response frame."""
        try:
            catp.write_frame(self._proc.stdin, request_payload)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ConnectionLost(f"kernel went away mid-write: {exc}") from exc
        reply = catp.read_frame(self._proc.stdout)
        if reply is None:
            raise ConnectionLost("kernel closed the stream before answering")
        return reply

    def close(self) -> None:
        if self._proc.stdin and not self._proc.stdin.closed:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self) -> "KernelClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
