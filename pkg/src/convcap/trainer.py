"""Objective, initialization, Adam, the training loop and checkpoint persistence."""

from __future__ import annotations

import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (GradCheckReport, Tensor, add, current_tape, grad_check, masked_nll, no_grad,
                       precision, private_tape, scale, sum_squares)
from .config import ModelConfig, TrainConfig, configs_from_text, dump_config
from .corpus import Batch, CaptionExample, Vocabulary, batches_per_epoch, collate, make_batches
from .errors import FormatError, InputError, NumericError
from .model import Captioner, is_bias, is_vision, param_shapes

log = logging.getLogger(__name__)

TRUNCATION = 2.0


def truncated_normal(rng: np.random.Generator, shape, stddev: float) -> np.ndarray:
    """Normal(0, stddev^2) samples, redrawing any that land outside +-2 stddev."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > TRUNCATION
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > TRUNCATION
    return x * stddev


def encoder_stddev(shape: tuple[int, ...]) -> float:
    """He-style scale sqrt(2 / fan_in) for a (kh, kw, in, out) encoder kernel."""
    return float(np.sqrt(2.0 / np.prod(shape[:-1])))


def init_params(shapes: dict[str, tuple[int, ...]], seed: int, stddev: float = 0.01,
                dtype=None) -> dict[str, Tensor]:
    """
    Weights from a truncated normal, biases zero; each tensor gets its own seeded stream.

    Captioner weights use ``stddev``.  Encoder kernels stand in for a pretrained
    backbone and use a fan-in scaled stddev instead, so the grid features start
    at unit-ish magnitude rather than vanishing through three layers.
    """
    dtype = dtype or np.float32
    params = {}
    for name, shape in shapes.items():
        if is_bias(name):
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            data = truncated_normal(rng, shape, encoder_stddev(shape) if is_vision(name) else stddev)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return params


def init_model(cfg: ModelConfig, seed: int, stddev: float = 0.01, dtype=None) -> Captioner:
    return Captioner(cfg, init_params(param_shapes(cfg), seed, stddev, dtype))


def regularized_names(params: dict[str, Tensor]) -> list[str]:
    """Weight matrices and kernels; biases and the embedding table stay out of the L2 term."""
    return [n for n in params if not is_bias(n) and n != "embed"]


def _raise_nonfinite(model: Captioner, what: str) -> None:
    for name, p in model.params.items():
        if not np.isfinite(p.data).all():
            raise NumericError(f"{what} is not finite; parameter {name!r} holds non-finite values")
    raise NumericError(f"{what} is not finite although every parameter is finite")


@dataclass
class LossParts:
    total: Tensor
    nll_sum: float
    tokens: int


def batch_grid(model: Captioner, batch: Batch) -> Tensor:
    return model.features(images=batch.images(), features=batch.features())


def loss(batch: Batch, model: Captioner, l2: float = 0.0) -> LossParts:
    """Summed masked cross-entropy averaged over the batch, plus (l2/2) * sum of squared weights."""
    out = model.forward(batch.tokens, batch_grid(model, batch))
    nll = masked_nll(out.probs, batch.targets, batch.mask)
    total = scale(nll, 1.0 / batch.size)
    if l2 > 0:
        reg = None
        for name in regularized_names(model.params):
            sq = sum_squares(model.params[name])
            reg = sq if reg is None else add(reg, sq)
        total = add(total, scale(reg, l2 / 2))
    if not np.isfinite(total.data).all():
        _raise_nonfinite(model, "loss")
    return LossParts(total, nll.item(), int(batch.mask.sum()))


def l2_term(model: Captioner, l2: float) -> float:
    return l2 / 2 * sum(float((model.params[n].data.astype(np.float64) ** 2).sum())
                        for n in regularized_names(model.params))


def token_loss(dataset: Sequence[CaptionExample], model: Captioner, vocab: Vocabulary,
               batch_size: int = 10) -> float:
    """Mean per-token cross-entropy over ``dataset`` (no regularizer)."""
    nll, tokens = 0.0, 0
    with no_grad():
        for batch in make_batches(dataset, vocab, batch_size, model.config.max_len, shuffle_seed=None):
            parts = loss(batch, model)
            nll += parts.nll_sum
            tokens += parts.tokens
    return nll / tokens


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: base_lr * decay_factor ** floor(step / decay_every)."""
    return cfg.base_lr * cfg.decay_factor ** (step // cfg.decay_every)


class Adam:
    """Adam with bias correction; encoder parameters get a scaled learning rate."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: dict[str, Tensor], step: int) -> None:
        adam_step(params, {n: p.grad for n, p in params.items()}, step, self.cfg, self.m, self.v)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], step: int, cfg: TrainConfig,
              m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
    """Apply update number ``step`` (0-based) in place, updating the moment buffers ``m`` and ``v``."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = step + 1
    base = learning_rate(step, cfg)
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"step {step}: gradient of {name!r} is not finite")
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        lr = base * cfg.vision_lr_multiplier if is_vision(name) else base
        with np.errstate(over="ignore"):            # overflow is reported just below
            update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(update).all():
            raise NumericError(f"step {step}: Adam update of {name!r} is not finite")
        p.data -= update.astype(p.data.dtype, copy=False)


# checkpoints

CKPT_MAGIC = b"CCNN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""
    vocab_text: str = ""

    def configs(self) -> tuple[ModelConfig, TrainConfig]:
        vocab_size = len(self.vocab()) if self.vocab_text else self.params["pred.up"].shape[0]
        return configs_from_text(self.config_text, vocab_size)

    def vocab(self) -> Vocabulary:
        return Vocabulary.from_text(self.vocab_text)

    def model(self, dtype=None) -> Captioner:
        model_cfg, _ = self.configs()
        tensors = {n: Tensor(a, requires_grad=True, dtype=dtype or a.dtype, name=n) for n, a in self.params.items()}
        return Captioner(model_cfg, tensors)


def _text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _entry_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = list(ckpt.params.items())
    entries += [(f"adam.m/{n}", a) for n, a in ckpt.adam_m.items()]
    entries += [(f"adam.v/{n}", a) for n, a in ckpt.adam_v.items()]
    if ckpt.config_text:
        entries.append(("meta/config", _text_entry(ckpt.config_text)))
    if ckpt.vocab_text:
        entries.append(("meta/vocab", _text_entry(ckpt.vocab_text)))
    return entries


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """
    Binary layout (little-endian): "CCNN", version u32, step u64, entry count u32,
    then per entry: name length u16, UTF-8 name, rank u8, dims u32 x rank, float32 payload;
    finally a CRC32 over all payload bytes.
    """
    entries = checkpoint_entries(ckpt)
    head = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, ckpt.step, len(entries))]
    crc = 0
    for name, arr in entries:
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        crc = zlib.crc32(payload, crc)
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
                    + struct.pack(f"<{arr.ndim}I", *arr.shape) + payload)
    head.append(struct.pack("<I", crc))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(head))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    step, count = r.unpack("<QI", "header")
    ckpt = Checkpoint(step=step, params={})
    crc = 0
    for _ in range(count):
        (name_len,) = r.unpack("<H", "entry name length")
        name = r.take(name_len, "entry name").decode("utf-8")
        (rank,) = r.unpack("<B", "entry rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)), f"payload of {name}")
        crc = zlib.crc32(payload, crc)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name == "meta/config":
            ckpt.config_text = _entry_text(arr)
        elif name == "meta/vocab":
            ckpt.vocab_text = _entry_text(arr)
        elif name.startswith("adam.m/"):
            ckpt.adam_m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            ckpt.adam_v[name[7:]] = arr
        else:
            ckpt.params[name] = arr
    crc_at = r.pos
    (stored,) = r.unpack("<I", "checksum")
    if stored != crc:
        raise FormatError(f"{path}: payload checksum mismatch", crc_at)
    if r.pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after checksum", r.pos)
    return ckpt


def make_checkpoint(model: Captioner, step: int, optimizer: Adam | None = None,
                    model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                    vocab: Vocabulary | None = None) -> Checkpoint:
    return Checkpoint(
        step=step,
        params={n: p.data.copy() for n, p in model.params.items()},
        adam_m={n: a.copy() for n, a in optimizer.m.items()} if optimizer else {},
        adam_v={n: a.copy() for n, a in optimizer.v.items()} if optimizer else {},
        config_text=dump_config(model_cfg or model.config, train_cfg or TrainConfig()),
        vocab_text=vocab.to_text() if vocab else "",
    )


# training loop

@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float

    def line(self) -> str:
        return f"{self.step}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{self.lr:.6g}\t{self.seconds:.3f}"


@dataclass
class TrainResult:
    model: Captioner
    step: int
    losses: list[float]                 # objective value of every step taken in this run
    evals: list[EvalRecord]
    checkpoint: Checkpoint
    stop_reason: str


def train(dataset: Sequence[CaptionExample], vocab: Vocabulary, model_cfg: ModelConfig,
          train_cfg: TrainConfig, val_set: Sequence[CaptionExample] | None = None,
          resume: Checkpoint | None = None,
          on_eval: Callable[[EvalRecord], None] | None = None) -> TrainResult:
    """
    Optimize the captioner on ``dataset`` with Adam.

    Batch order is a pure function of (seed, step), so a run resumed from a
    checkpoint replays exactly the batches the uninterrupted run would see.
    Evaluation happens every ``eval_every`` steps: the validation per-token
    loss drives early stopping (``patience`` evaluations without improvement)
    and the optional ``target_loss`` threshold.
    """
    if not dataset:
        raise InputError("cannot train on an empty dataset")
    train_cfg.validate()
    model_cfg.vocab_size = len(vocab)
    model_cfg.validate()
    dtype = np.float64 if train_cfg.precision == "float64" else np.float32
    with precision(dtype):
        if resume is not None:
            model = resume.model(dtype)
            step = resume.step
        else:
            model = init_model(model_cfg, train_cfg.seed, train_cfg.init_stddev, dtype)
            step = 0
        opt = Adam(model.params, train_cfg)
        if resume is not None and resume.adam_m:
            opt.m = {n: resume.adam_m[n].astype(dtype) for n in model.params}
            opt.v = {n: resume.adam_v[n].astype(dtype) for n in model.params}
        log_path = Path(train_cfg.metrics_log) if train_cfg.metrics_log else None
        start = time.perf_counter()
        per_epoch = batches_per_epoch(len(dataset), train_cfg.batch_size)
        epoch_batches: list[Batch] = []
        cached_epoch = -1
        losses: list[float] = []
        evals: list[EvalRecord] = []
        best, stale = float("inf"), 0
        run_nll, run_tokens = 0.0, 0
        stop_reason = "max_steps"

        def checkpoint_now() -> Checkpoint:
            ckpt = make_checkpoint(model, step, opt, model_cfg, train_cfg, vocab)
            if train_cfg.checkpoint:
                save_checkpoint(ckpt, train_cfg.checkpoint)
            return ckpt

        while step < train_cfg.max_steps:
            epoch, index = divmod(step, per_epoch)
            if epoch != cached_epoch:
                epoch_batches = list(make_batches(dataset, vocab, train_cfg.batch_size, model_cfg.max_len,
                                                  shuffle_seed=train_cfg.seed + epoch))
                cached_epoch = epoch
            batch = epoch_batches[index]
            current_tape().clear()
            for p in model.params.values():
                p.zero_grad()
            try:
                parts = loss(batch, model, train_cfg.l2)
                parts.total.backward()
                opt.step(model.params, step)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from exc
            losses.append(parts.total.item())
            run_nll += parts.nll_sum
            run_tokens += parts.tokens
            step += 1

            if step % train_cfg.eval_every and step != train_cfg.max_steps:
                continue
            train_loss = run_nll / max(run_tokens, 1)
            run_nll, run_tokens = 0.0, 0
            val_loss = token_loss(val_set, model, vocab, train_cfg.batch_size) if val_set else train_loss
            record = EvalRecord(step, train_loss, val_loss, learning_rate(step - 1, train_cfg),
                                time.perf_counter() - start)
            evals.append(record)
            log.info("step %d train %.4f val %.4f", step, train_loss, val_loss)
            if log_path:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(record.line() + "\n")
            if on_eval:
                on_eval(record)
            checkpoint_now()
            if train_cfg.target_loss and val_loss < train_cfg.target_loss:
                stop_reason = "target_loss"
                break
            if val_set:
                if val_loss < best:
                    best, stale = val_loss, 0
                else:
                    stale += 1
                    if stale >= train_cfg.patience:
                        stop_reason = "early_stopping"
                        break
        return TrainResult(model, step, losses, evals, checkpoint_now(), stop_reason)


def toy_batch(vocab_size: int, length: int, sentences: int, d: int, d_feat: int,
              rng: np.random.Generator) -> Batch:
    """Random sentences of ``length`` content words over precomputed ``d x d`` grids."""
    words = [f"w{i}" for i in range(vocab_size - 4)]
    vocab = Vocabulary(words)
    examples = []
    for s in range(sentences):
        n_words = length if s == 0 else max(1, length - 1 - s)
        caption = " ".join(rng.choice(words, size=n_words))
        examples.append(CaptionExample(f"toy{s}", caption, features=rng.standard_normal((d * d, d_feat))))
    return collate(examples, vocab)


def model_grad_check(depth: int = 2, kernel: int = 2, seed: int = 0, hierarchical: bool = False,
                     skip_every: int = 0, d_embed: int = 8, d_feat: int = 6, d_hidden: int = 10,
                     vocab_size: int = 11, length: int = 5, d: int = 2, l2: float = 1e-2,
                     weight_scale: float = 0.4, h: float = 1e-5, tol: float = 1e-4,
                     max_entries: int | None = None) -> GradCheckReport:
    """
    Finite-difference check of the full training objective on a 2-sentence toy batch.

    Runs in float64.  Weights are drawn larger than the training initializer
    so that gradients stand well clear of finite-difference round-off.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab_size, d_embed=d_embed, d_feat=d_feat, d_hidden=d_hidden,
                      depth=depth, kernel=kernel, skip_every=skip_every, hierarchical=hierarchical,
                      image_size=0)
    with precision(np.float64):
        params = init_params(param_shapes(cfg), seed, weight_scale, np.float64)
        for name, p in params.items():
            if is_bias(name):
                p.data[...] = rng.normal(0, weight_scale, p.shape)
        model = Captioner(cfg, params)
        batch = toy_batch(vocab_size, length, 2, d, d_feat, rng)
        with private_tape():
            return grad_check(lambda: loss(batch, model, l2).total, model.params, h=h, tol=tol,
                              max_entries=max_entries, seed=seed)
