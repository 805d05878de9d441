"""
Plain text problem files.

Matrix file:
    m N n
    sizes: N_1 ... N_n
    row col value        (one 0-indexed triplet per line, column-major)
    b:
    b_1
    ...

Problem bundle: a matrix file followed by
    r: value
    pi:                  (optional, m values)
    psi:                 (n lines: kind followed by its parameters)
        zero
        linear_box c_1..c_Ni lo_1..lo_Ni hi_1..hi_Ni
        linear_quadratic mu c_1..c_Ni
"""
import logging
import pathlib
import typing

import numpy as np
import scipy.sparse

from blockopt.blockstruct import BlockMatrix, BlockPartition
from blockopt.errors import BundleFormatError
from blockopt.problem import (
    BlockPsi,
    CompositeProblem,
    LinearBoxPsi,
    LinearQuadraticPsi,
    ZeroPsi,
)

logger = logging.getLogger(__name__)

SECTIONS = ("b:", "r:", "pi:", "psi:")


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _fmt_all(values: typing.Iterable[float]) -> str:
    return " ".join(_fmt(v) for v in values)


def write_matrix(stream: typing.TextIO, A: BlockMatrix) -> None:
    partition = A.partition
    stream.write(f"{A.rows} {partition.N} {partition.n}\n")
    stream.write("sizes: " + " ".join(str(int(s)) for s in partition.sizes) + "\n")
    coo = A.matrix.tocoo()
    for row, col, value in zip(coo.row, coo.col, coo.data):
        stream.write(f"{row} {col} {_fmt(value)}\n")
    stream.write("b:\n")
    for value in A.b:
        stream.write(_fmt(value) + "\n")


def _psi_line(psi_i: BlockPsi) -> str:
    if isinstance(psi_i, ZeroPsi):
        return psi_i.kind
    return f"{psi_i.kind} {_fmt_all(psi_i.parameters())}"


def write_bundle(stream: typing.TextIO, p: CompositeProblem) -> None:
    """
    Writes the problem as given, multipliers kept apart from the block terms
    """
    write_matrix(stream, p.A)
    stream.write(f"r: {_fmt(p.r)}\n")
    if np.any(p.pi):
        stream.write("pi:\n")
        for value in p.pi:
            stream.write(_fmt(value) + "\n")
    stream.write("psi:\n")
    for psi_i in p.psi:
        stream.write(_psi_line(psi_i) + "\n")


class _Lines:
    def __init__(self, stream: typing.TextIO):
        self._lines = [line.strip() for line in stream]
        self._lines = [line for line in self._lines if line]
        self.position = 0

    def peek(self) -> typing.Optional[str]:
        return self._lines[self.position] if self.position < len(self._lines) else None

    def next(self) -> str:
        line = self.peek()
        if line is None:
            raise BundleFormatError("Unexpected end of file")
        self.position += 1
        return line

    def values_until_section(self) -> typing.List[float]:
        values = []
        while (line := self.peek()) is not None and not line.startswith(SECTIONS):
            values.extend(_floats(self.next().split()))
        return values


def _floats(tokens: typing.Sequence[str]) -> typing.List[float]:
    try:
        return [float(token) for token in tokens]
    except ValueError as e:
        raise BundleFormatError(f"Bad number: {e}")


def _ints(tokens: typing.Sequence[str]) -> typing.List[int]:
    try:
        return [int(token) for token in tokens]
    except ValueError as e:
        raise BundleFormatError(f"Bad integer: {e}")


def _read_matrix(lines: _Lines) -> BlockMatrix:
    header = _ints(lines.next().split())
    if len(header) != 3:
        raise BundleFormatError(f"Header must be 'm N n', got {header}")
    m, N, n = header
    sizes_line = lines.next()
    if not sizes_line.startswith("sizes:"):
        raise BundleFormatError("Expected a 'sizes:' line after the header")
    sizes = _ints(sizes_line[len("sizes:") :].split())
    if len(sizes) != n or sum(sizes) != N:
        raise BundleFormatError(f"Sizes {sizes} do not describe {n} blocks over {N} columns")

    rows, cols, vals = [], [], []
    while (line := lines.peek()) is not None and not line.startswith("b:"):
        tokens = lines.next().split()
        if len(tokens) != 3:
            raise BundleFormatError(f"Expected 'row col value', got {tokens}")
        row, col = _ints(tokens[:2])
        if not (0 <= row < m and 0 <= col < N):
            raise BundleFormatError(f"Entry ({row}, {col}) outside a {m}x{N} matrix")
        rows.append(row)
        cols.append(col)
        vals.extend(_floats(tokens[2:]))
    if lines.next() != "b:":
        raise BundleFormatError("Expected a 'b:' line")
    b = lines.values_until_section()
    if len(b) != m:
        raise BundleFormatError(f"Expected {m} right-hand side values, got {len(b)}")
    matrix = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(m, N))
    return BlockMatrix(matrix, BlockPartition(sizes), np.array(b))


def read_matrix(stream: typing.TextIO) -> BlockMatrix:
    return _read_matrix(_Lines(stream))


def _parse_psi(line: str, size: int) -> BlockPsi:
    kind, *tokens = line.split()
    values = _floats(tokens)
    if kind == ZeroPsi.kind and not values:
        return ZeroPsi(size)
    if kind == LinearBoxPsi.kind and len(values) == 3 * size:
        return LinearBoxPsi(values[:size], values[size : 2 * size], values[2 * size :])
    if kind == LinearQuadraticPsi.kind and len(values) == size + 1:
        return LinearQuadraticPsi(values[1:], values[0])
    raise BundleFormatError(f"Cannot read block term '{line}' for a block of size {size}")


def read_bundle(stream: typing.TextIO) -> CompositeProblem:
    """
    A bare matrix file reads as r = 1, pi = 0 and zero block terms
    """
    lines = _Lines(stream)
    A = _read_matrix(lines)
    r, pi, psi = 1.0, None, None
    while (line := lines.peek()) is not None:
        lines.next()
        if line.startswith("r:"):
            r = _floats(line[2:].split())[0]
        elif line == "pi:":
            pi = np.array(lines.values_until_section())
            if len(pi) != A.rows:
                raise BundleFormatError(f"Expected {A.rows} multipliers, got {len(pi)}")
        elif line == "psi:":
            psi = [_parse_psi(lines.next(), int(size)) for size in A.partition.sizes]
        else:
            raise BundleFormatError(f"Unexpected line '{line}'")
    logger.debug("Read bundle %r with r=%g", A, r)
    return CompositeProblem(A, r=r, psi=psi, pi=pi)


def save(path: typing.Union[str, pathlib.Path], p: CompositeProblem) -> None:
    with open(path, "w") as stream:
        write_bundle(stream, p)


def load(path: typing.Union[str, pathlib.Path]) -> CompositeProblem:
    with open(path) as stream:
        return read_bundle(stream)
