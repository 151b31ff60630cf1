"""A laptop-sized vision-language model wired around the TLM fusion block.

Pipeline for one sample::

    image --patch embed (theta_v)--> tokens --TLM (theta_ae)--> tokens'
    c = mean(tokens')
    logits_t = (W + (alpha / r) B A) [c ; E[input_t]] + b     (theta_llm, theta_lora)

Parameters live in four named groups so the staged trainers can freeze whole
groups and prove it byte-for-byte.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CorruptCheckpoint, EmptyMask, ShapeMismatch
from .tlm import PriorBatch, TlmParams, TokenGrid, tlm_backward, tlm_forward

GROUPS = ("theta_v", "theta_ae", "theta_llm", "theta_lora")
GROUP_TENSORS = {
    "theta_v": ("patch_w", "patch_b"),
    "theta_ae": ("w1", "b1", "w2", "b2"),
    "theta_llm": ("tok_emb", "head_w", "head_b"),
    "theta_lora": ("lora_a", "lora_b"),
}


@dataclass
class ModelConfig:
    image_size: int = 16
    patch: int = 4
    channels: int = 32
    embed_dims: int = 64
    hidden: int = 128
    vocab: int = 64
    token_dims: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    sigma: float = 1.0
    epsilon: float = 1e-6
    tlm_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @property
    def grid(self):
        return self.image_size // self.patch

    @property
    def head_in(self):
        return self.channels + self.token_dims


@dataclass
class ParamPartition:
    """Disjoint named parameter groups plus a trainable flag per group."""

    groups: dict
    trainable: dict

    def tensor(self, group, name):
        return self.groups[group][name]

    def serialize(self, group):
        """Canonical bytes of one group; used to prove a group stayed frozen."""
        return b"".join(
            np.ascontiguousarray(self.groups[group][n], dtype="<f8").tobytes()
            for n in GROUP_TENSORS[group]
        )

    def copy(self):
        return ParamPartition(
            {g: {n: a.copy() for n, a in t.items()} for g, t in self.groups.items()},
            dict(self.trainable),
        )


@dataclass
class TripletSample:
    image: np.ndarray
    priors: PriorBatch
    input_ids: np.ndarray
    target_ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not (self.input_ids.shape == self.target_ids.shape == self.mask.shape):
            raise ShapeMismatch("input ids, targets and mask must align")


@dataclass
class _Cache:
    grid: TokenGrid
    patches: np.ndarray
    tape: object
    modulated: np.ndarray
    z: np.ndarray
    w_eff: np.ndarray
    input_ids: np.ndarray


class ToyVlm:
    def __init__(self, config, partition):
        self.config = config
        self.partition = partition

    @classmethod
    def init(cls, config):
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        p2 = cfg.patch * cfg.patch
        theta_v = {
            "patch_w": rng.normal(0.0, 1.0 / np.sqrt(p2), size=(cfg.channels, p2)),
            "patch_b": rng.normal(0.0, 0.1, size=cfg.channels),
        }
        tlm = TlmParams.init(cfg.embed_dims, cfg.channels, cfg.hidden, rng, cfg.sigma, cfg.epsilon)
        theta_ae = tlm.tensors()
        theta_llm = {
            "tok_emb": rng.normal(0.0, 1.0, size=(cfg.vocab, cfg.token_dims)),
            "head_w": rng.normal(0.0, 1.0 / np.sqrt(cfg.head_in), size=(cfg.vocab, cfg.head_in)),
            "head_b": np.zeros(cfg.vocab),
        }
        theta_lora = {
            "lora_a": rng.normal(0.0, 1.0 / np.sqrt(cfg.head_in), size=(cfg.lora_rank, cfg.head_in)),
            "lora_b": np.zeros((cfg.vocab, cfg.lora_rank)),
        }
        groups = {"theta_v": theta_v, "theta_ae": theta_ae,
                  "theta_llm": theta_llm, "theta_lora": theta_lora}
        trainable = {g: False for g in GROUPS}
        return cls(config, ParamPartition(groups, trainable))

    def copy(self):
        return ToyVlm(ModelConfig(**asdict(self.config)), self.partition.copy())

    @property
    def tlm_params(self):
        ae = self.partition.groups["theta_ae"]
        return TlmParams(ae["w1"], ae["b1"], ae["w2"], ae["b2"],
                         self.config.sigma, self.config.epsilon)

    @property
    def lora_scale(self):
        return self.config.lora_alpha / self.config.lora_rank

    def encode_image(self, image):
        """Fixed linear patch embedding -> TokenGrid (row-major patches)."""
        cfg = self.config
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (cfg.image_size, cfg.image_size):
            raise ShapeMismatch(f"image must be {cfg.image_size}x{cfg.image_size}, got {image.shape}")
        g, p = cfg.grid, cfg.patch
        patches = image.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)
        v = self.partition.groups["theta_v"]
        tokens = patches @ v["patch_w"].T + v["patch_b"]
        return TokenGrid(tokens, g, g), patches

    def _forward(self, sample):
        cfg = self.config
        grid, patches = self.encode_image(sample.image)
        if cfg.tlm_enabled:
            modulated, tape = tlm_forward(grid, sample.priors, self.tlm_params)
        else:
            modulated, tape = grid.tokens, None
        cond = modulated.mean(axis=0)
        ids = sample.input_ids
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
            raise ShapeMismatch(f"token ids out of range for vocab {cfg.vocab}")
        llm = self.partition.groups["theta_llm"]
        lora = self.partition.groups["theta_lora"]
        z = np.concatenate([np.broadcast_to(cond, (len(ids), cfg.channels)), llm["tok_emb"][ids]], axis=1)
        w_eff = llm["head_w"] + self.lora_scale * (lora["lora_b"] @ lora["lora_a"])
        logits = z @ w_eff.T + llm["head_b"]
        return logits, _Cache(grid, patches, tape, modulated, z, w_eff, ids)

    def forward(self, sample):
        return self._forward(sample)[0]

    def loss_and_grads(self, sample, groups):
        """Masked NLL and its gradient for the listed groups only."""
        logits, cache = self._forward(sample)
        loss, dlogits = nll_loss_and_grad(logits, sample.target_ids, sample.mask)
        return loss, self.backward(cache, dlogits, groups)

    def backward(self, cache, dlogits, groups):
        cfg = self.config
        groups = set(groups)
        grads = {}
        d_weff = dlogits.T @ cache.z
        if "theta_lora" in groups:
            lora = self.partition.groups["theta_lora"]
            s = self.lora_scale
            grads["theta_lora"] = {
                "lora_a": s * lora["lora_b"].T @ d_weff,
                "lora_b": s * d_weff @ lora["lora_a"].T,
            }
        if "theta_llm" in groups:
            d_emb = np.zeros_like(self.partition.groups["theta_llm"]["tok_emb"])
            dz = dlogits @ cache.w_eff
            np.add.at(d_emb, cache.input_ids, dz[:, cfg.channels:])
            grads["theta_llm"] = {"tok_emb": d_emb, "head_w": d_weff, "head_b": dlogits.sum(axis=0)}
        if groups & {"theta_ae", "theta_v"}:
            dz = dlogits @ cache.w_eff
            d_cond = dz[:, : cfg.channels].sum(axis=0)
            d_mod = np.broadcast_to(d_cond / cache.modulated.shape[0], cache.modulated.shape)
            if cfg.tlm_enabled:
                tg = tlm_backward(cache.tape, d_mod)
                d_tokens = tg.tokens
            else:
                tg, d_tokens = None, d_mod
            if "theta_ae" in groups:
                if tg is None:  # clamped TLM has no live parameters
                    grads["theta_ae"] = {n: np.zeros_like(a) for n, a in
                                         self.partition.groups["theta_ae"].items()}
                else:
                    grads["theta_ae"] = {"w1": tg.w1, "b1": tg.b1, "w2": tg.w2, "b2": tg.b2}
            if "theta_v" in groups:
                grads["theta_v"] = {"patch_w": d_tokens.T @ cache.patches,
                                    "patch_b": d_tokens.sum(axis=0)}
        return grads


def greedy_decode(model, image, priors, prompt_ids, bos, eos, max_new=4):
    """Append argmax tokens after ``prompt_ids`` until ``eos`` or ``max_new``."""
    out = []
    ids = [bos, *prompt_ids]
    for _ in range(max_new):
        n = len(ids)
        sample = TripletSample(image, priors, ids, np.zeros(n, dtype=np.int64), np.zeros(n))
        nxt = int(model.forward(sample)[-1].argmax())
        out.append(nxt)
        if nxt == eos:
            break
        ids.append(nxt)
    return out


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_loss(logits, targets, mask):
    return nll_loss_and_grad(logits, targets, mask)[0]


def nll_loss_and_grad(logits, targets, mask):
    """Mean negative log-likelihood over positions with mask > 0."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise ShapeMismatch(f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    total = mask.sum()
    if total <= 0:
        raise EmptyMask("no target position is unmasked")
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = -(logp[rows, targets] * mask).sum() / total
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad *= (mask / total)[:, None]
    return loss, grad


# --- checkpoint container ---------------------------------------------------
#
# b"FGPT" | version u8 | config_len u32 | config JSON | n_entries u32
# entries: name_len u16 | name | rank u8 | dims u32*rank | offset u64
# payload: float64 little-endian, offsets relative to payload start

CKPT_MAGIC = b"FGPT"
CKPT_VERSION = 1


def encode_checkpoint(model):
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    entries, payload, offset = [], [], 0
    for group in GROUPS:
        for name in GROUP_TENSORS[group]:
            arr = np.ascontiguousarray(model.partition.groups[group][name], dtype="<f8")
            key = f"{group}/{name}".encode()
            entry = struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
            entry += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset)
            entries.append(entry)
            payload.append(arr.tobytes())
            offset += arr.nbytes
    head = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(cfg)) + cfg
    head += struct.pack("<I", len(entries))
    return head + b"".join(entries) + b"".join(payload)


def decode_checkpoint(blob):
    blob = bytes(blob)
    try:
        return _decode_checkpoint(blob)
    except CorruptCheckpoint:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from exc


def _decode_checkpoint(blob):
    if blob[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint("bad checkpoint magic")
    version, cfg_len = struct.unpack_from("<BI", blob, 4)
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    pos = 9
    config = ModelConfig(**json.loads(blob[pos:pos + cfg_len].decode()))
    pos += cfg_len
    (n_entries,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    directory = []
    for _ in range(n_entries):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        key = blob[pos:pos + nlen].decode()
        pos += nlen
        rank = blob[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        directory.append((key, dims, offset))
    expected = [f"{g}/{n}" for g in GROUPS for n in GROUP_TENSORS[g]]
    if [k for k, _, _ in directory] != expected:
        raise CorruptCheckpoint("checkpoint group directory does not match the model layout")
    payload = blob[pos:]
    groups = {g: {} for g in GROUPS}
    end = 0
    for key, dims, offset in directory:
        count = int(np.prod(dims, dtype=np.int64))
        if offset != end or offset + 8 * count > len(payload):
            raise CorruptCheckpoint(f"tensor {key} runs past the end of the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        group, name = key.split("/")
        groups[group][name] = arr.astype(np.float64).reshape(dims)
        end = offset + 8 * count
    if end != len(payload):
        raise CorruptCheckpoint(f"{len(payload) - end} trailing bytes after payload")
    model = ToyVlm(config, ParamPartition(groups, {g: False for g in GROUPS}))
    ref = ToyVlm.init(config)
    for g in GROUPS:
        for n in GROUP_TENSORS[g]:
            if groups[g][n].shape != ref.partition.groups[g][n].shape:
                raise CorruptCheckpoint(f"{g}/{n} has shape {groups[g][n].shape}, "
                                        f"config implies {ref.partition.groups[g][n].shape}")
    return model


def save_checkpoint(model, path):
    with open(os.fspath(path), "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path):
    with open(os.fspath(path), "rb") as fh:
        return decode_checkpoint(fh.read())
