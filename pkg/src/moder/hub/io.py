"""Hub persistence in the shared MODR container.

Payload after the container header: u64 encoder fingerprint, encoder spec
(5 x i64: seed, vocab, d_tok, hidden, dim), u64 hub seed, u8 variant
(0 LoRA, 1 VeRA), u32 rank, u32 entry count, then per entry: u32 class-id,
name, i64 task-id, zero-shot embedding, u32 layer count with
(layer, u32 out, u32 in) triples, u32 tensor count and (name, float32 array)
pairs.  VeRA's shared basis is regenerated from the hub
seed on load.
"""

from __future__ import annotations

from pathlib import Path

from moder import container
from moder.encoder.adapters import AdapterModule, Variant, vera_basis
from moder.encoder.model import EncoderSpec, ReferenceEncoder
from moder.errors import FormatError
from moder.hub.core import FoundationalHub, HubEntry
from moder.numerics.params import Param, ParamSet

_VARIANT_CODE = {Variant.LORA: 0, Variant.VERA: 1}
_CODE_VARIANT = {v: k for k, v in _VARIANT_CODE.items()}


def dumps(hub: FoundationalHub) -> bytes:
    w = container.Writer(container.KIND_HUB)
    w.u64(hub.encoder_fingerprint)
    s = hub.encoder_spec
    for v in (s.seed, s.vocab_size, s.d_tok, s.hidden, s.dim):
        w.i64(v)
    w.u64(hub.seed & 0xFFFFFFFFFFFFFFFF)
    w.u8(_VARIANT_CODE[hub.variant])
    w.u32(hub.rank)
    w.u32(len(hub.entries))
    for cid, e in hub.entries.items():
        w.u32(cid)
        w.string(e.name)
        w.i64(e.task_id)
        w.array(e.zero_shot)
        w.u32(len(e.adapter.shapes))
        for layer, (d_out, d_in) in e.adapter.shapes.items():
            w.string(layer)
            w.u32(d_out)
            w.u32(d_in)
        params = e.adapter.params
        w.u32(len(params))
        for k in params:
            w.string(k)
            w.array(params[k])
    return w.getvalue()


def save(hub: FoundationalHub, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(hub))
    tmp.replace(path)


def read_header(data: bytes) -> tuple[container.Reader, int, EncoderSpec]:
    r = container.Reader(data, container.KIND_HUB)
    fingerprint = r.u64()
    spec = EncoderSpec(*(r.i64() for _ in range(5)))
    return r, fingerprint, spec


def loads(data: bytes, encoder: ReferenceEncoder | None = None) -> FoundationalHub:
    """Parse a hub; with ``encoder`` given, its fingerprint must match the file's."""
    r, fingerprint, spec = read_header(data)
    if encoder is not None and encoder.fingerprint != fingerprint:
        raise FormatError(
            f"encoder fingerprint mismatch: file has {fingerprint:#018x}, encoder has {encoder.fingerprint:#018x}"
        )
    seed = r.u64()
    code = r.u8()
    if code not in _CODE_VARIANT:
        raise FormatError(f"unknown adapter variant code {code}")
    variant = _CODE_VARIANT[code]
    rank = r.u32()
    hub = FoundationalHub(seed, fingerprint, spec, variant, rank)
    count = r.u32()
    for _ in range(count):
        cid = r.u32()
        name = r.string()
        task_id = r.i64()
        z = r.array()
        shapes = {}
        for _ in range(r.u32()):
            layer = r.string()
            shapes[layer] = (r.u32(), r.u32())
        params = {}
        for _ in range(r.u32()):
            k = r.string()
            params[k] = Param(r.array())
        _check_tensors(params, shapes, variant, rank)
        basis = vera_basis(seed, shapes, rank) if variant is Variant.VERA else None
        adapter = AdapterModule(variant, cid, rank, shapes, ParamSet(params), basis)
        if cid in hub.entries:
            raise FormatError(f"duplicate class id {cid}")
        hub.entries[cid] = HubEntry(cid, name, adapter, z, task_id)
    r.finish()
    return hub


def load(path: str | Path, encoder: ReferenceEncoder | None = None) -> FoundationalHub:
    return loads(Path(path).read_bytes(), encoder)


def _check_tensors(params: dict[str, Param], shapes: dict[str, tuple[int, int]], variant: Variant, rank: int) -> None:
    expected = {}
    for layer, (d_out, d_in) in shapes.items():
        if variant is Variant.LORA:
            expected[f"{layer}.B"] = (d_out, rank)
            expected[f"{layer}.A"] = (rank, d_in)
        else:
            expected[f"{layer}.d"] = (rank,)
            expected[f"{layer}.b"] = (d_out,)
    got = {k: p.value.shape for k, p in params.items()}
    if got != expected:
        raise FormatError(f"adapter tensors {got} do not match layer shapes {expected}")
