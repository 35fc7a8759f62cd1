"""Workload description: layers, DAG, counting and W-dimension tiling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

KINDS = ("conv2d", "maxpool", "avgpool", "residual_add", "fully_connected")
ANALOG_KINDS = ("conv2d",)
SCHEMA_VERSION = 1


class WorkloadError(ValueError):
    pass


class TilingError(ValueError):
    pass


@dataclass
class LayerSpec:
    id: str
    kind: str
    c_in: int
    c_out: int
    k_x: int
    k_y: int
    stride: int
    pad: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    predecessors: list[str] = field(default_factory=list)

    @property
    def is_analog(self) -> bool:
        return self.kind in ANALOG_KINDS

    @property
    def weight_rows(self) -> int:
        return self.c_in * self.k_x * self.k_y

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            return [f"{self.id}: unknown kind {self.kind!r}"]
        if min(self.c_in, self.c_out, self.k_x, self.k_y, self.stride,
               self.h_in, self.w_in, self.h_out, self.w_out) <= 0 or self.pad < 0:
            out.append(f"{self.id}: non-positive dimension")
            return out
        if self.kind != "fully_connected":
            h = (self.h_in - self.k_y + 2 * self.pad) // self.stride + 1
            w = (self.w_in - self.k_x + 2 * self.pad) // self.stride + 1
            if (h, w) != (self.h_out, self.w_out):
                out.append(f"{self.id}: output {self.h_out}x{self.w_out} != computed {h}x{w}")
        if self.kind == "residual_add" and len(self.predecessors) != 2:
            out.append(f"{self.id}: residual_add needs exactly 2 predecessors")
        if self.kind in ("conv2d", "maxpool", "avgpool", "fully_connected") and len(self.predecessors) > 1:
            out.append(f"{self.id}: {self.kind} takes one predecessor")
        if self.kind in ("maxpool", "avgpool", "residual_add") and self.c_in != self.c_out:
            out.append(f"{self.id}: {self.kind} must keep the channel count")
        return out

    def input_cols(self, a: int, b: int) -> tuple[int, int]:
        """Input columns [lo, hi) needed for output columns [a, b)."""
        if self.kind == "fully_connected":
            return 0, self.w_in
        lo = max(0, a * self.stride - self.pad)
        hi = min(self.w_in, (b - 1) * self.stride - self.pad + self.k_x)
        return lo, hi


def conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n - k + 2 * pad) // stride + 1


def param_count(l: LayerSpec, bias: bool = False) -> int:
    if l.kind == "conv2d":
        return l.c_out * l.c_in * l.k_x * l.k_y + (l.c_out if bias else 0)
    if l.kind == "fully_connected":
        return l.c_out * l.c_in + (l.c_out if bias else 0)
    return 0


def op_count(l: LayerSpec) -> int:
    """Operations per image, one MAC counted as two ops."""
    if l.kind == "conv2d":
        return 2 * l.c_out * l.h_out * l.w_out * l.c_in * l.k_x * l.k_y
    if l.kind == "fully_connected":
        return 2 * l.c_in * l.c_out
    if l.kind == "residual_add":
        return l.c_out * l.h_out * l.w_out
    # pooling: one op per window element per output
    return l.c_out * l.h_out * l.w_out * l.k_x * l.k_y


@dataclass
class DnnGraph:
    layers: list[LayerSpec]
    batch: int = 16
    image_h: int = 256
    image_w: int = 256
    name: str = "custom"

    def __post_init__(self) -> None:
        self._by_id = {l.id: l for l in self.layers}

    def __getitem__(self, lid: str) -> LayerSpec:
        return self._by_id[lid]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(p, l.id) for l in self.layers for p in l.predecessors]

    def successors(self, lid: str) -> list[str]:
        return [l.id for l in self.layers if lid in l.predecessors]

    @property
    def source(self) -> LayerSpec:
        return next(l for l in self.layers if not l.predecessors)

    @property
    def sink(self) -> LayerSpec:
        return next(l for l in self.layers if not self.successors(l.id))

    def ops_per_image(self) -> int:
        return sum(op_count(l) for l in self.layers)

    def params(self) -> int:
        return sum(param_count(l) for l in self.layers)

    def violations(self) -> list[str]:
        out: list[str] = []
        seen: set[str] = set()
        if len(self._by_id) != len(self.layers):
            out.append("duplicate layer ids")
        for l in self.layers:
            out += l.violations()
            for p in l.predecessors:
                if p not in self._by_id:
                    out.append(f"{l.id}: unknown predecessor {p!r}")
                    continue
                if p not in seen:
                    out.append(f"{l.id}: predecessor {p} not listed earlier (cycle or bad order)")
                src = self._by_id[p]
                if (src.c_out, src.h_out, src.w_out) != (l.c_in, l.h_in, l.w_in):
                    out.append(
                        f"edge {p} -> {l.id}: producer OFM {src.c_out}x{src.h_out}x{src.w_out} "
                        f"!= consumer IFM {l.c_in}x{l.h_in}x{l.w_in}")
            seen.add(l.id)
        if self.layers:
            if sum(1 for l in self.layers if not l.predecessors) != 1:
                out.append("graph must have a single source")
            if sum(1 for l in self.layers if not self.successors(l.id)) != 1:
                out.append("graph must have a single sink")
        else:
            out.append("empty graph")
        if self.batch <= 0:
            out.append("batch must be > 0")
        return out

    def validate(self) -> "DnnGraph":
        v = self.violations()
        if v:
            raise WorkloadError("; ".join(v))
        return self

    def groups(self) -> dict[int, list[str]]:
        """Layers grouped by IFM height, group 0 = largest."""
        dims = sorted({l.h_in for l in self.layers}, reverse=True)
        g: dict[int, list[str]] = {}
        for l in self.layers:
            g.setdefault(dims.index(l.h_in), []).append(l.id)
        return g

    def group_of(self, lid: str) -> int:
        return next(g for g, ids in self.groups().items() if lid in ids)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "name": self.name, "batch": self.batch,
                "image": [self.image_h, self.image_w],
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "DnnGraph":
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise WorkloadError(f"unsupported workload schema_version {d['schema_version']}")
        try:
            layers = [LayerSpec(**ld) for ld in d["layers"]]
        except (KeyError, TypeError) as e:
            raise WorkloadError(f"bad workload: {e}") from None
        h, w = d.get("image", [layers[0].h_in, layers[0].w_in])
        return cls(layers, batch=d.get("batch", 16), image_h=h, image_w=w,
                   name=d.get("name", "custom"))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DnnGraph":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise WorkloadError(f"{path}: {e}") from None


def _conv(lid, pred, c_in, c_out, k, stride, pad, h, w) -> LayerSpec:
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    return LayerSpec(lid, "conv2d", c_in, c_out, k, k, stride, pad, h, w, ho, wo,
                     [pred] if pred else [])


def build_resnet18(image_h: int = 256, image_w: int = 256, batch: int = 16) -> DnnGraph:
    """Standard ResNet-18 DAG.

    Ids follow a pipeline numbering where residual adds get their own
    index and the 1x1 projections share the index of the add they feed
    (suffix ``p``): L0 conv7x7, L1 maxpool, L2..L25 basic blocks, L26
    avgpool, L27 fully connected.
    """
    if image_h <= 0 or image_w <= 0 or batch <= 0:
        raise WorkloadError("image dims and batch must be positive")
    if image_h % 32 or image_w % 32:
        raise WorkloadError("image dims must be divisible by 32")
    layers = [_conv("L0", None, 3, 64, 7, 2, 3, image_h, image_w)]
    h, w = layers[0].h_out, layers[0].w_out
    mp = LayerSpec("L1", "maxpool", 64, 64, 3, 3, 2, 1, h, w,
                   conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1), ["L0"])
    layers.append(mp)
    h, w, c = mp.h_out, mp.w_out, 64
    prev = "L1"
    idx = 2
    for stage, c_out in enumerate((64, 128, 256, 512)):
        for block in range(2):
            stride = 2 if (stage > 0 and block == 0) else 1
            a = _conv(f"L{idx}", prev, c, c_out, 3, stride, 1, h, w)
            b = _conv(f"L{idx + 1}", a.id, c_out, c_out, 3, 1, 1, a.h_out, a.w_out)
            layers += [a, b]
            skip = prev
            if stride != 1 or c != c_out:
                p = _conv(f"L{idx + 2}p", prev, c, c_out, 1, stride, 0, h, w)
                layers.append(p)
                skip = p.id
            add = LayerSpec(f"L{idx + 2}", "residual_add", c_out, c_out, 1, 1, 1, 0,
                            b.h_out, b.w_out, b.h_out, b.w_out, [b.id, skip])
            layers.append(add)
            prev, c, h, w = add.id, c_out, add.h_out, add.w_out
            idx += 3
    layers.append(LayerSpec(f"L{idx}", "avgpool", c, c, w, h, w, 0, h, w, 1, 1, [prev]))
    layers.append(LayerSpec(f"L{idx + 1}", "fully_connected", c, 1000, 1, 1, 1, 0, 1, 1, 1, 1,
                            [f"L{idx}"]))
    return DnnGraph(layers, batch=batch, image_h=image_h, image_w=image_w,
                    name="resnet18").validate()


def build_toy_cnn(image_h: int = 32, image_w: int = 32, batch: int = 2) -> DnnGraph:
    """Three-layer smoke workload: two 3x3 convs and a global average pool."""
    a = _conv("C0", None, 3, 8, 3, 1, 1, image_h, image_w)
    b = _conv("C1", "C0", 8, 16, 3, 2, 1, a.h_out, a.w_out)
    pool = LayerSpec("P2", "avgpool", 16, 16, b.w_out, b.h_out, b.w_out, 0, b.h_out, b.w_out,
                     1, 1, ["C1"])
    return DnnGraph([a, b, pool], batch=batch, image_h=image_h, image_w=image_w,
                    name="toy").validate()


def input_bytes_per_out_col(l: LayerSpec) -> int:
    return l.c_in * l.h_in


@dataclass
class TilePlan:
    layer: str
    tile_w: int
    tiles_per_image: int
    ifm_tile_bytes: int
    ofm_tile_bytes: int
    halo: int

    def col_range(self, j: int, w_out: int) -> tuple[int, int]:
        a = j * self.tile_w
        return a, min(w_out, a + self.tile_w)


def _tile_bytes(l: LayerSpec, tw: int, in_bytes: int, out_bytes: int) -> tuple[int, int]:
    n_in = 2 if l.kind == "residual_add" else 1
    if l.kind == "fully_connected":
        ifm_cols = l.w_in
    else:
        ifm_cols = (tw - 1) * l.stride + l.k_x
    return (n_in * l.c_in * l.h_in * ifm_cols * in_bytes,
            l.c_out * l.h_out * tw * out_bytes)


def plan_tiles(l: LayerSpec, l1_budget_bytes: int, in_bytes: int = 1,
               out_bytes: int = 1, scratch_bytes: int = 0) -> TilePlan:
    """Largest W_out tile whose double-buffered IFM and OFM fit the budget."""
    best = 0
    for tw in range(l.w_out, 0, -1):
        ifm, ofm = _tile_bytes(l, tw, in_bytes, out_bytes)
        if 2 * ifm + 2 * ofm + scratch_bytes <= l1_budget_bytes:
            best = tw
            break
    if best == 0:
        ifm, ofm = _tile_bytes(l, 1, in_bytes, out_bytes)
        raise TilingError(
            f"layer {l.id}: a 1-column tile needs {2 * ifm + 2 * ofm + scratch_bytes} B, "
            f"budget is {l1_budget_bytes} B")
    ifm, ofm = _tile_bytes(l, best, in_bytes, out_bytes)
    return TilePlan(l.id, best, -(-l.w_out // best), ifm, ofm, max(0, l.k_x - l.stride))
