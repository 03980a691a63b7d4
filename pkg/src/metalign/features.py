"""Per-vertex modality vectors and their fusion into initial embeddings.

Feature vectors are produced upstream (text, SMILES and sequence encoders) and
arrive as a feature table. Binary layout, repeated until EOF, little endian::

    [id_len:u32][id bytes, utf-8][field_tag:u8][dim:u32][float32 x dim]

field_tag: 0 = surface form, 1 = description, 2 = modality (SMILES embedding for
metabolites, sequence embedding for genes). The id is ``gene:<local_id>`` or
``metabolite:<local_id>``; a bare ``<local_id>`` is accepted when it names
exactly one vertex of the graph.

The TSV debug format carries the same records, one per line::

    <id>\t<surface|description|modality>\t<space separated floats>
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch
from torch import nn

from .graph import Kind, MetabolicGraph, VertexId

log = logging.getLogger(__name__)

FIELDS = ("surface", "description", "modality")
_HEADER = struct.Struct("<I")


class FeatureError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class FeatureBundle:
    surface: np.ndarray
    description: np.ndarray
    modality: np.ndarray | None = None

    @property
    def text(self) -> np.ndarray:
        return np.concatenate([self.surface, self.description])


# ------------------------------------------------------------------------ file I/O


def _vertex_key(v: VertexId) -> str:
    return f"{v.kind.value}:{v.local_id}"


def write_features(
    path: str | Path, table: Mapping[VertexId, FeatureBundle], fmt: str | None = None
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = fmt or ("tsv" if path.suffix == ".tsv" else "bin")
    records = []
    for v in sorted(table):
        b = table[v]
        for tag, vec in enumerate((b.surface, b.description, b.modality)):
            if vec is not None:
                records.append((_vertex_key(v), tag, np.asarray(vec, dtype="<f4")))
    if fmt == "tsv":
        with path.open("w", encoding="utf-8") as fh:
            for key, tag, vec in records:
                fh.write(f"{key}\t{FIELDS[tag]}\t{' '.join(repr(float(x)) for x in vec)}\n")
        return
    with path.open("wb") as fh:
        for key, tag, vec in records:
            raw = key.encode("utf-8")
            fh.write(_HEADER.pack(len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tag))
            fh.write(_HEADER.pack(len(vec)))
            fh.write(vec.tobytes())


def _read_binary(path: Path) -> Iterator[tuple[str, int, np.ndarray]]:
    data = path.read_bytes()
    pos = 0
    while pos < len(data):
        try:
            (n,) = _HEADER.unpack_from(data, pos)
            pos += 4
            key = data[pos : pos + n].decode("utf-8")
            pos += n
            tag = data[pos]
            pos += 1
            (dim,) = _HEADER.unpack_from(data, pos)
            pos += 4
        except (struct.error, IndexError):
            raise FeatureError("Truncated", f"{path}: truncated record header at byte {pos}") from None
        end = pos + 4 * dim
        if end > len(data):
            raise FeatureError("Truncated", f"{path}: truncated vector for {key}")
        yield key, tag, np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64)
        pos = end


def _read_tsv(path: Path) -> Iterator[tuple[str, int, np.ndarray]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in FIELDS:
                raise FeatureError("MalformedLine", f"{path}:{lineno}")
            vec = np.array([float(x) for x in parts[2].split()], dtype=np.float64)
            yield parts[0], FIELDS.index(parts[1]), vec


def load_features(path: str | Path, graph: MetabolicGraph) -> dict[VertexId, FeatureBundle]:
    """Map every vertex of ``graph`` to its bundle; absent modality stays ``None``."""
    path = Path(path)
    if not path.exists():
        raise FeatureError("MissingInput", f"feature file not found: {path}")
    by_key: dict[str, list[VertexId]] = {}
    for v in graph.vertices:
        by_key.setdefault(_vertex_key(v), []).append(v)
        by_key.setdefault(v.local_id, []).append(v)
    reader = _read_tsv if path.suffix == ".tsv" else _read_binary

    fields: dict[VertexId, list[np.ndarray | None]] = {}
    text_dim: int | None = None
    modality_dim: dict[Kind, int] = {}
    for key, tag, vec in reader(path):
        if tag > 2:
            raise FeatureError("BadField", f"{path}: field tag {tag} for {key}")
        owners = by_key.get(key, [])
        if not owners:
            log.warning("%s: unknown vertex id %r skipped", path, key)
            continue
        if len(owners) > 1:
            raise FeatureError("AmbiguousId", f"{path}: {key!r} names both a gene and a metabolite")
        v = owners[0]
        if tag < 2:
            if text_dim is None:
                text_dim = len(vec)
            elif len(vec) != text_dim:
                raise FeatureError(
                    "DimMismatch", f"{path}: {key} {FIELDS[tag]} has dim {len(vec)}, expected {text_dim}"
                )
        else:
            expected = modality_dim.setdefault(v.kind, len(vec))
            if len(vec) != expected:
                raise FeatureError(
                    "DimMismatch", f"{path}: {key} modality has dim {len(vec)}, expected {expected}"
                )
        fields.setdefault(v, [None, None, None])[tag] = vec

    out = {}
    for v in sorted(graph.vertices):
        sur, des, mod = fields.get(v, [None, None, None])
        if sur is None or des is None:
            raise FeatureError("MissingText", f"{path}: vertex {v} lacks surface/description vectors")
        out[v] = FeatureBundle(sur, des, mod)
    return out


# ------------------------------------------------------------------------- fusion


def uniform_(t: torch.Tensor, fan: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


class FusionLayer(nn.Module):
    """Projects modality vectors into a common space and mixes them with text.

    metabolite: ``shared @ [text, smile_proj @ smiles]``
    gene:       ``shared @ [text, seq_proj @ sequence]``

    No biases, so the fused vector is linear in the bundle. A missing modality
    enters as the zero vector of the projected size.
    """

    def __init__(
        self,
        text_dim: int,
        smile_dim: int,
        seq_dim: int,
        proj_dim: int,
        out_dim: int,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.text_dim, self.proj_dim, self.out_dim = text_dim, proj_dim, out_dim
        self.proj_smile = nn.Parameter(torch.empty(proj_dim, smile_dim, dtype=torch.float64))
        self.proj_seq = nn.Parameter(torch.empty(proj_dim, seq_dim, dtype=torch.float64))
        self.proj_shared = nn.Parameter(
            torch.empty(out_dim, text_dim + proj_dim, dtype=torch.float64)
        )
        gen = generator or torch.Generator().manual_seed(0)
        for p in (self.proj_smile, self.proj_seq, self.proj_shared):
            uniform_(p, p.shape[1], gen)

    def forward(self, text: torch.Tensor, modality: torch.Tensor, is_gene: torch.Tensor) -> torch.Tensor:
        """Batch fusion.

        ``text`` is ``[n, text_dim]``; ``modality`` is ``[n, max(smile, seq)]``
        zero padded, zero rows for absent vectors; ``is_gene`` is a bool mask.
        """
        smile_dim = self.proj_smile.shape[1]
        seq_dim = self.proj_seq.shape[1]
        proj_m = modality[:, :smile_dim] @ self.proj_smile.T
        proj_g = modality[:, :seq_dim] @ self.proj_seq.T
        projected = torch.where(is_gene[:, None], proj_g, proj_m)
        return torch.cat([text, projected], dim=1) @ self.proj_shared.T


def fuse(bundle: FeatureBundle, params: FusionLayer, kind: Kind) -> torch.Tensor:
    text = torch.as_tensor(bundle.text, dtype=torch.float64)
    if len(text) != params.text_dim:
        raise FeatureError("DimMismatch", f"text dim {len(text)} != {params.text_dim}")
    proj = params.proj_seq if kind is Kind.GENE else params.proj_smile
    if bundle.modality is None:
        projected = torch.zeros(params.proj_dim, dtype=torch.float64)
    else:
        mod = torch.as_tensor(bundle.modality, dtype=torch.float64)
        if len(mod) != proj.shape[1]:
            raise FeatureError("DimMismatch", f"modality dim {len(mod)} != {proj.shape[1]}")
        projected = proj @ mod
    return params.proj_shared @ torch.cat([text, projected])


@dataclass
class FeatureMatrix:
    """Stacked bundles for a vertex ordering, ready for :class:`FusionLayer`."""

    text: torch.Tensor
    modality: torch.Tensor
    is_gene: torch.Tensor
    smile_dim: int
    seq_dim: int

    @classmethod
    def stack(cls, vertices: list[VertexId], table: Mapping[VertexId, FeatureBundle]) -> "FeatureMatrix":
        text = np.stack([table[v].text for v in vertices])
        dims = {Kind.GENE: 0, Kind.METABOLITE: 0}
        for v in vertices:
            mod = table[v].modality
            if mod is not None:
                dims[v.kind] = max(dims[v.kind], len(mod))
        width = max(dims.values()) or 1
        modality = np.zeros((len(vertices), width))
        for i, v in enumerate(vertices):
            mod = table[v].modality
            if mod is not None:
                modality[i, : len(mod)] = mod
        return cls(
            text=torch.as_tensor(text, dtype=torch.float64),
            modality=torch.as_tensor(modality, dtype=torch.float64),
            is_gene=torch.tensor([v.kind is Kind.GENE for v in vertices]),
            smile_dim=max(dims[Kind.METABOLITE], 1),
            seq_dim=max(dims[Kind.GENE], 1),
        )


def random_init(graph: MetabolicGraph, dim: int, seed: int) -> dict[VertexId, np.ndarray]:
    """I.i.d. uniform entries in ``[-1/sqrt(dim), 1/sqrt(dim)]``, vertices in sorted order."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vertices = sorted(graph.vertices)
    bound = 1.0 / math.sqrt(dim)
    values = np.random.default_rng(seed).uniform(-bound, bound, size=(len(vertices), dim))
    return {v: values[i] for i, v in enumerate(vertices)}
