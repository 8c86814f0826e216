"""Network architectures, composite losses, checkpoints, and training.

Three nets share one conv trunk recipe:

* base: single frame -> conv trunk -> FC stack -> steering.
* command: five frames 0.1 s apart -> shared conv + embed per frame -> LSTM
  -> shared FC -> steering + 3-class speed-command logits.
* mmmt: single frame -> visual features; a separate encoder embeds the
  feedback window of prior speeds; steering reads the visual features only
  (window changes can never move it), the speed head reads both.

Parameters live in a plain ``{name: float32 array}`` dict; forward passes
bind them into a fresh Graph each call, so float64 graphs for gradient
checking are just a dtype argument away.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datapipe as dp
from . import images
from .config import ConfigError, RunConfig

CKPT_MAGIC = b"EMVC"
CKPT_VERSION = 1
STATE_MAGIC = b"EMVT"
STATE_VERSION = 1


def effective_task_weight(cfg) -> float:
    """task_weight < 0 means the per-model default (1.0 mmmt, 0.5 command)."""
    if cfg.task_weight >= 0:
        return float(cfg.task_weight)
    return 0.5 if cfg.model == "command" else 1.0


def _conv_out(side, spec):
    for k, stride, _ in spec:
        if k > side:
            raise ConfigError(f"conv kernel {k} larger than feature side {side}")
        side = (side - k) // stride + 1
        if side < 1:
            raise ConfigError("conv stack shrinks the image to nothing")
    return side


def conv_flat_width(cfg) -> int:
    side = _conv_out(cfg.input_side, cfg.conv_spec)
    return side * side * cfg.conv_spec[-1][2]


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _linear_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(np.float32)


def _init_trunk(rng, cfg, params):
    cin = 3
    for i, (k, _, cout) in enumerate(cfg.conv_spec, start=1):
        params[f"conv{i}.w"] = _he(rng, (k, k, cin, cout), k * k * cin)
        params[f"conv{i}.b"] = np.zeros(cout, dtype=np.float32)
        cin = cout


def _init_fc(rng, params, widths, n_in, prefix="fc"):
    for i, width in enumerate(widths, start=1):
        params[f"{prefix}{i}.w"] = _he(rng, (n_in, width), n_in)
        params[f"{prefix}{i}.b"] = np.zeros(width, dtype=np.float32)
        n_in = width
    return n_in


def _init_head(rng, params, name, n_in, n_out):
    params[f"{name}.w"] = _linear_init(rng, (n_in, n_out), n_in)
    params[f"{name}.b"] = np.zeros(n_out, dtype=np.float32)


class ModelBase:
    kind = "?"

    def __init__(self, cfg: RunConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: RunConfig):
        rng = np.random.default_rng([cfg.seed, 0x6D6F64])
        return cls(cfg, cls._init_params(rng, cfg))

    def bind(self, graph: ad.Graph) -> dict:
        """Bind every parameter into the graph; returns name -> Tensor."""
        return {name: graph.tensor(arr, param=True, name=name)
                for name, arr in sorted(self.params.items())}

    def pull_grads(self, bound: dict) -> dict:
        return {name: t.grad for name, t in bound.items()}

    # shared pieces ---------------------------------------------------------

    def _trunk(self, g, pt, x: ad.Tensor) -> ad.Tensor:
        h = x
        for i, (_, stride, _) in enumerate(self.cfg.conv_spec, start=1):
            h = ad.relu(ad.conv2d(h, pt[f"conv{i}.w"], pt[f"conv{i}.b"], stride=stride))
        return ad.flatten_batch(h)

    def _fc_stack(self, g, pt, h, n_layers, prefix="fc"):
        for i in range(1, n_layers + 1):
            h = ad.relu(ad.affine(h, pt[f"{prefix}{i}.w"], pt[f"{prefix}{i}.b"]))
        return h


class BaseNet(ModelBase):
    """Single-frame steering regressor."""

    kind = "base"

    @staticmethod
    def _init_params(rng, cfg):
        params = {}
        _init_trunk(rng, cfg, params)
        n = _init_fc(rng, params, cfg.fc_widths, conv_flat_width(cfg))
        _init_head(rng, params, "steer", n, 1)
        return params

    def forward(self, g, pt, images) -> dict:
        x = g.tensor(images)
        h = self._fc_stack(g, pt, self._trunk(g, pt, x), len(self.cfg.fc_widths))
        steer = ad.affine(h, pt["steer.w"], pt["steer.b"])
        n = images.shape[0] if images.ndim == 4 else None
        return {"steer": ad.reshape(steer, (n,) if n else (1,))}

    def loss(self, g, pt, batch) -> tuple:
        out = self.forward(g, pt, batch["images"])
        total = ad.weighted_mae(out["steer"], batch["steer"], batch["weights"])
        return total, {"angle": float(total.data), "second": 0.0}

    def predict(self, image) -> float:
        g = ad.Graph(np.float32)
        out = self.forward(g, self.bind(g), image.astype(np.float32)[None])
        return float(out["steer"].data[0])


class CommandNet(ModelBase):
    """Frame-sequence net with an LSTM and steering + command heads."""

    kind = "command"

    @staticmethod
    def _init_params(rng, cfg):
        params = {}
        _init_trunk(rng, cfg, params)
        embed = cfg.fc_widths[0]
        params["embed.w"] = _he(rng, (conv_flat_width(cfg), embed), conv_flat_width(cfg))
        params["embed.b"] = np.zeros(embed, dtype=np.float32)
        u = cfg.lstm_hidden
        params["lstm.wx"] = _linear_init(rng, (embed, 4 * u), embed)
        params["lstm.wh"] = _linear_init(rng, (u, 4 * u), u)
        b = np.zeros(4 * u, dtype=np.float32)
        b[u:2 * u] = 1.0  # forget gate starts open
        params["lstm.b"] = b
        shared = cfg.fc_widths[-1]
        params["shared.w"] = _he(rng, (u, shared), u)
        params["shared.b"] = np.zeros(shared, dtype=np.float32)
        _init_head(rng, params, "steer", shared, 1)
        _init_head(rng, params, "cmd", shared, 3)
        return params

    def forward(self, g, pt, frame_seqs) -> dict:
        """frame_seqs: [N, T, S, S, 3] oldest frame first."""
        n, t = frame_seqs.shape[:2]
        u = self.cfg.lstm_hidden
        h = g.tensor(np.zeros((n, u)))
        c = g.tensor(np.zeros((n, u)))
        for step in range(t):
            x = g.tensor(frame_seqs[:, step])
            feat = self._trunk(g, pt, x)
            emb = ad.relu(ad.affine(feat, pt["embed.w"], pt["embed.b"]))
            h, c = ad.lstm_step(emb, h, c, pt["lstm.wx"], pt["lstm.wh"], pt["lstm.b"])
        shared = ad.relu(ad.affine(h, pt["shared.w"], pt["shared.b"]))
        steer = ad.reshape(ad.affine(shared, pt["steer.w"], pt["steer.b"]), (n,))
        logits = ad.affine(shared, pt["cmd.w"], pt["cmd.b"])
        return {"steer": steer, "logits": logits}

    def loss(self, g, pt, batch) -> tuple:
        out = self.forward(g, pt, batch["frames"])
        angle = ad.weighted_mae(out["steer"], batch["steer"], batch["weights"])
        ce = ad.softmax_cross_entropy(out["logits"], batch["cmd_onehot"])
        tw = effective_task_weight(self.cfg)
        total = ad.add(angle, ad.scale(ce, tw))
        return total, {"angle": float(angle.data), "second": float(ce.data)}

    def predict(self, frames) -> tuple:
        g = ad.Graph(np.float32)
        out = self.forward(g, self.bind(g), frames.astype(np.float32)[None])
        logits = out["logits"].data[0]
        z = logits - logits.max()
        p = np.exp(z) / np.exp(z).sum()
        return float(out["steer"].data[0]), p


class MultiModalNet(ModelBase):
    """Single frame + speed-feedback window; steering sees only the frame."""

    kind = "mmmt"

    @staticmethod
    def _init_params(rng, cfg):
        params = {}
        _init_trunk(rng, cfg, params)
        n = _init_fc(rng, params, cfg.fc_widths, conv_flat_width(cfg))
        _init_head(rng, params, "steer", n, 1)
        e = _init_fc(rng, params, cfg.speed_encoder_widths, cfg.speed_window,
                     prefix="spd_enc")
        _init_head(rng, params, "speed", n + e, 1)
        return params

    def forward(self, g, pt, images, windows) -> dict:
        x = g.tensor(images)
        visual = self._fc_stack(g, pt, self._trunk(g, pt, x), len(self.cfg.fc_widths))
        steer = ad.affine(visual, pt["steer.w"], pt["steer.b"])
        w = g.tensor(np.asarray(windows) / self.cfg.speed_norm_mps)
        enc = self._fc_stack(g, pt, w, len(self.cfg.speed_encoder_widths),
                             prefix="spd_enc")
        both = ad.concat(visual, enc)
        speed = ad.affine(both, pt["speed.w"], pt["speed.b"])
        n = images.shape[0] if images.ndim == 4 else 1
        return {"steer": ad.reshape(steer, (n,)),
                "speed": ad.reshape(speed, (n,))}

    def loss(self, g, pt, batch) -> tuple:
        out = self.forward(g, pt, batch["images"], batch["windows"])
        angle = ad.weighted_mae(out["steer"], batch["steer"], batch["weights"])
        ones = np.ones(len(batch["steer"]), dtype=np.float64)
        spd = ad.weighted_mae(out["speed"], batch["target_speed"], ones)
        tw = effective_task_weight(self.cfg)
        total = ad.add(angle, ad.scale(spd, tw))
        return total, {"angle": float(angle.data), "second": float(spd.data)}

    def predict(self, image, window) -> tuple:
        g = ad.Graph(np.float32)
        out = self.forward(g, self.bind(g), image.astype(np.float32)[None],
                           np.asarray(window, dtype=np.float32)[None])
        return float(out["steer"].data[0]), float(out["speed"].data[0])


_MODEL_KINDS = {"base": BaseNet, "command": CommandNet, "mmmt": MultiModalNet}

# keys that fix the parameter shapes; a resumed run may change anything else
_ARCH_KEYS = ("model", "input_side", "conv_spec", "fc_widths", "lstm_hidden",
              "seq_len", "speed_window", "speed_encoder_widths")


def check_same_architecture(cfg_a, cfg_b) -> None:
    for key in _ARCH_KEYS:
        if getattr(cfg_a, key) != getattr(cfg_b, key):
            raise ConfigError(
                f"architecture mismatch on {key!r}: "
                f"{getattr(cfg_a, key)} vs {getattr(cfg_b, key)}")


def build_model(cfg: RunConfig):
    try:
        cls = _MODEL_KINDS[cfg.model]
    except KeyError:
        raise ConfigError(f"unknown model kind {cfg.model!r}") from None
    return cls.create(cfg)


# ---------------------------------------------------------------------------
# checkpoint wire format

def checkpoint_bytes(model) -> bytes:
    cfg_bytes = model.cfg.text().encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
           struct.pack("<I", len(cfg_bytes)), cfg_bytes,
           struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name]
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def model_from_checkpoint_bytes(data: bytes):
    if data[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    pos = 12
    cfg = RunConfig.from_text(data[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
        tensors[name] = arr
    if pos != len(data):
        raise ValueError("trailing bytes after last checkpoint tensor")
    model = build_model(cfg)
    if set(tensors) != set(model.params):
        missing = set(model.params) - set(tensors)
        extra = set(tensors) - set(model.params)
        raise ValueError(f"checkpoint tensors do not match architecture: "
                         f"missing {sorted(missing)}, extra {sorted(extra)}")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise ValueError(f"tensor {name}: shape {arr.shape} != "
                             f"{model.params[name].shape}")
        model.params[name] = arr
    return model


def write_checkpoint(path, model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path):
    return model_from_checkpoint_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# batch assembly

def _augmented_image(rec, steer, rng, cfg):
    img = rec.image_float().astype(np.float64)
    if rng is not None and cfg.augment:
        img, steer = dp.augment_sample(img, steer, rng,
                                       flip_prob=cfg.flip_prob,
                                       rotation_jitter_deg=cfg.rotation_jitter_deg)
    return img.astype(np.float32), steer


def batch_single(records, idxs, cfg, rng=None, with_window=False) -> dict:
    """Assemble a batch for the single-frame nets; rng enables augmentation."""
    images, steer, weights = [], [], []
    windows, targets = [], []
    for i in idxs:
        rec = records[i]
        img, s = _augmented_image(rec, rec.steering_deg, rng, cfg)
        images.append(img)
        steer.append(s)
        weights.append(rec.weight)
        if with_window:
            win = rec.window.astype(np.float64)
            if rng is not None and cfg.speed_noise_sigma > 0:
                win = dp.synthesize_speed_noise(win, rng, cfg.speed_noise_sigma)
            windows.append(win.astype(np.float32))
            targets.append(rec.target_speed_mps)
    batch = {"images": np.stack(images),
             "steer": np.asarray(steer, dtype=np.float64),
             "weights": np.asarray(weights, dtype=np.float64)}
    if with_window:
        batch["windows"] = np.stack(windows)
        batch["target_speed"] = np.asarray(targets, dtype=np.float64)
    return batch


def command_sequences(records, cfg) -> list:
    """All (stream records, chain indices) sequence anchors in the shard."""
    spacing = cfg.seq_stride_frames / cfg.sim_fps
    out = []
    streams = dp.records_by_stream(records)
    for key in sorted(streams):
        stream = streams[key]
        for chain in dp.sequence_anchors(stream, cfg.seq_len, spacing):
            out.append([stream[j] for j in chain])
    return out


def batch_command(sequences, idxs, cfg, rng=None) -> dict:
    frames, steer, onehot, weights = [], [], [], []
    for i in idxs:
        chain = sequences[i]
        anchor = chain[-1]
        s = anchor.steering_deg
        if rng is not None and cfg.augment:
            # one flip coin and one angle for the whole sequence
            do_flip = rng.random() < cfg.flip_prob
            angle = rng.uniform(-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg)
            seq = []
            for rec in chain:
                img = rec.image_float().astype(np.float64)
                if do_flip:
                    img = images.flip_horizontal(img)
                if cfg.rotation_jitter_deg > 0:
                    img = images.rotate_about_center(img, angle)
                seq.append(img.astype(np.float32))
            if do_flip:
                s = -s
        else:
            seq = [rec.image_float() for rec in chain]
        frames.append(np.stack(seq))
        steer.append(s)
        oh = np.zeros(3, dtype=np.float64)
        oh[anchor.command] = 1.0
        onehot.append(oh)
        weights.append(dp.sample_weight(s, cfg.angle_weight_step_deg,
                                        cfg.angle_weight_cap))
    return {"frames": np.stack(frames),
            "steer": np.asarray(steer, dtype=np.float64),
            "weights": np.asarray(weights, dtype=np.float64),
            "cmd_onehot": np.stack(onehot)}


# ---------------------------------------------------------------------------
# training

def _lr_at(cfg, step, total_steps) -> float:
    if cfg.lr_schedule == "cosine":
        frac = min(step / max(total_steps, 1), 1.0)
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    return cfg.lr


def _items_for(model, shard, cfg):
    if model.kind == "command":
        return command_sequences(shard.records, cfg)
    return shard.records


def _batch_for(model, items, idxs, cfg, rng=None):
    if model.kind == "command":
        return batch_command(items, idxs, cfg, rng)
    return batch_single(items, idxs, cfg, rng, with_window=(model.kind == "mmmt"))


def evaluate(model, shard, cfg, batch_size=None) -> dict:
    """Unaugmented metrics over a whole shard."""
    items = _items_for(model, shard, cfg)
    if not items:
        raise ValueError("shard holds no evaluable items for this model")
    bs = batch_size or cfg.batch
    n = len(items)
    abs_err_sum = 0.0
    second_sum = 0.0
    correct = 0
    for lo in range(0, n, bs):
        idxs = range(lo, min(lo + bs, n))
        batch = _batch_for(model, items, idxs, cfg, rng=None)
        g = ad.Graph(np.float32)
        pt = model.bind(g)
        if model.kind == "base":
            out = model.forward(g, pt, batch["images"])
        elif model.kind == "mmmt":
            out = model.forward(g, pt, batch["images"], batch["windows"])
        else:
            out = model.forward(g, pt, batch["frames"])
        err = np.abs(out["steer"].data.astype(np.float64) - batch["steer"])
        abs_err_sum += float(err.sum())
        if model.kind == "mmmt":
            second_sum += float(np.abs(out["speed"].data.astype(np.float64)
                                       - batch["target_speed"]).sum())
        elif model.kind == "command":
            pred = out["logits"].data.argmax(axis=1)
            truth = batch["cmd_onehot"].argmax(axis=1)
            correct += int((pred == truth).sum())
    metrics = {"angle_mae": abs_err_sum / n, "n": n}
    if model.kind == "mmmt":
        metrics["speed_mae"] = second_sum / n
    elif model.kind == "command":
        metrics["cmd_acc"] = correct / n
    return metrics


def train(model, train_shard, val_shard, cfg, *, out_dir=None,
          resume_state=None, max_steps=None, log=None) -> dict:
    """Run the training loop; returns summary metrics.

    Deterministic: one PCG64 generator drives shuffling, augmentation, and
    window noise; its state (plus optimizer moments and counters) round-trips
    through the state file so a resumed run continues bit-identically.
    """
    items = _items_for(model, train_shard, cfg)
    if not items:
        raise ValueError("training shard holds no items for this model")
    opt = ad.make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x747261])
    start_epoch = 0
    step = 0
    best_val = None
    best_blob = None
    if resume_state is not None:
        st = resume_state
        check_same_architecture(st["model"].cfg, cfg)
        model.params = st["model"].params
        model.cfg = cfg  # the resumed run's settings win from here on
        opt.load_state_arrays(st["opt_arrays"])
        rng.bit_generator.state = st["rng_state"]
        start_epoch = st["epoch"]
        step = st["step"]
        best_val = st["best_val"]
        best_blob = st["best_blob"]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    steps_per_epoch = (len(items) + cfg.batch - 1) // cfg.batch
    total_steps = max_steps if max_steps is not None else cfg.epochs * steps_per_epoch
    metrics_lines = []
    summary = {}
    done = False
    for epoch in range(start_epoch, cfg.epochs):
        if done:
            break
        perm = rng.permutation(len(items))
        epoch_loss = 0.0
        epoch_angle = 0.0
        epoch_second = 0.0
        n_batches = 0
        for lo in range(0, len(items), cfg.batch):
            idxs = perm[lo:lo + cfg.batch]
            batch = _batch_for(model, items, idxs, cfg, rng)
            g = ad.Graph(np.float32)
            pt = model.bind(g)
            loss, parts = model.loss(g, pt, batch)
            ad.backward(loss)
            opt.step(model.params, model.pull_grads(pt), lr=_lr_at(cfg, step, total_steps))
            epoch_loss += float(loss.data)
            epoch_angle += parts["angle"]
            epoch_second += parts["second"]
            n_batches += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        val = evaluate(model, val_shard, cfg) if val_shard is not None else None
        line = (f"epoch {epoch + 1} step {step} "
                f"loss {epoch_loss / n_batches:.6f} "
                f"angle {epoch_angle / n_batches:.6f} "
                f"second {epoch_second / n_batches:.6f}")
        if val is not None:
            line += f" val_angle_mae {val['angle_mae']:.6f}"
            if best_val is None or val["angle_mae"] < best_val:
                best_val = val["angle_mae"]
                best_blob = checkpoint_bytes(model)
        metrics_lines.append(line)
        if log:
            log(line)
        summary = {"epochs_run": epoch + 1, "step": step,
                   "train_loss": epoch_loss / n_batches,
                   "train_angle": epoch_angle / n_batches,
                   "val": val}
        if out_dir is not None:
            write_checkpoint(out_dir / "last.ckpt", model)
            if best_blob is not None:
                (out_dir / "best.ckpt").write_bytes(best_blob)
            (out_dir / "metrics.log").write_text("\n".join(metrics_lines) + "\n",
                                                 encoding="utf-8")
            _write_state(out_dir / "train.state", model, opt, rng,
                         epoch + 1, step, best_val, best_blob)
    summary["best_val"] = best_val
    summary["metrics_lines"] = metrics_lines
    return summary


# ---------------------------------------------------------------------------
# resume state file

def _pack_named_arrays(arrays: dict) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        nb = name.encode("utf-8")
        code = {"float32": 0, "int64": 1, "float64": 2}[arr.dtype.name]
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype({0: "<f4", 1: "<i8", 2: "<f8"}[code]).tobytes())
    return b"".join(out)


def _unpack_named_arrays(data, pos):
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dtype = {0: "<f4", 1: "<i8", 2: "<f8"}[code]
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(data, dtype=dtype, count=n,
                                     offset=pos).reshape(dims).copy()
        pos += n * np.dtype(dtype).itemsize
    return arrays, pos


def _write_state(path, model, opt, rng, epoch, step, best_val, best_blob) -> None:
    import json
    ckpt = checkpoint_bytes(model)
    meta = {
        "epoch": epoch,
        "step": step,
        "optimizer": opt.kind,
        "best_val_hex": float(best_val).hex() if best_val is not None else "",
        "rng_state": _jsonable_rng_state(rng.bit_generator.state),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = best_blob if best_blob is not None else b""
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<I", STATE_VERSION))
        f.write(struct.pack("<Q", len(ckpt)))
        f.write(ckpt)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(_pack_named_arrays(opt.state_arrays()))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


def _jsonable_rng_state(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, int):
            return str(v)  # PCG64 words exceed 2^53; keep exact as strings
        return v
    return conv(state)


def _rng_state_from_json(state):
    def conv(v, key=None):
        if isinstance(v, dict):
            return {k: conv(x, k) for k, x in v.items()}
        if isinstance(v, str) and key != "bit_generator":
            return int(v)
        return v
    return conv(state)


def read_state(path) -> dict:
    import json
    data = Path(path).read_bytes()
    if data[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: not a training state file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != STATE_VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    (clen,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    model = model_from_checkpoint_bytes(data[pos:pos + clen])
    pos += clen
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    arrays, pos = _unpack_named_arrays(data, pos)
    (blen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    blob = data[pos:pos + blen] if blen else None
    return {
        "model": model,
        "opt_arrays": arrays,
        "rng_state": _rng_state_from_json(meta["rng_state"]),
        "epoch": meta["epoch"],
        "step": meta["step"],
        "best_val": float.fromhex(meta["best_val_hex"]) if meta["best_val_hex"] else None,
        "best_blob": blob,
    }


# ---------------------------------------------------------------------------
# model-level gradient checking

def gradcheck_batch(kind, cfg, n=2, seed=5) -> tuple:
    """A tiny random batch with the right fields for the given model kind."""
    rng = np.random.default_rng(seed)
    s = cfg.input_side
    if kind == "command":
        return {"frames": rng.random((n, cfg.seq_len, s, s, 3)),
                "steer": rng.normal(size=n) * 5,
                "weights": 1.0 + rng.random(n),
                "cmd_onehot": np.eye(3)[rng.integers(0, 3, size=n)]}
    batch = {"images": rng.random((n, s, s, 3)),
             "steer": rng.normal(size=n) * 5,
             "weights": 1.0 + rng.random(n)}
    if kind == "mmmt":
        batch["windows"] = 5.0 + rng.random((n, cfg.speed_window)) * 10
        batch["target_speed"] = 5.0 + rng.random(n) * 10
    return batch


def grad_check_model(model, batch, *, tolerance=1e-3, coords_per_param=20,
                     seed=0, fd_step=1e-5) -> ad.GradCheckReport:
    """Finite-difference check of the full composite loss in float64.

    At production widths a step this coarse occasionally lands a relu (or
    absolute-error) kink inside the probe interval and inflates the numeric
    slope; shrink fd_step rather than the tolerance when checking big nets.
    """

    def value_fn(params):
        g = ad.Graph(np.float64)
        pt = {name: g.tensor(arr, param=True) for name, arr in sorted(params.items())}
        loss, _ = model.loss(g, pt, batch)
        return float(loss.data)

    def grad_fn(params):
        g = ad.Graph(np.float64)
        pt = {name: g.tensor(arr, param=True) for name, arr in sorted(params.items())}
        loss, _ = model.loss(g, pt, batch)
        ad.backward(loss)
        return {name: t.grad for name, t in pt.items()}

    params64 = {name: arr.astype(np.float64) for name, arr in model.params.items()}
    return ad.grad_check(value_fn, grad_fn, params64, tolerance=tolerance,
                         coords_per_param=coords_per_param, seed=seed,
                         fd_step=fd_step)
