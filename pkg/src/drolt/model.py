"""Feed-forward feature extractor plus linear classifier with hand-written backprop."""

import hashlib
import io
import json
import zipfile

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


class CheckpointError(RuntimeError):
    pass


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    return np.maximum(x, 0.0)


def _act_grad(name, out):
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - out * out
    return (out > 0.0).astype(np.float64)


class Network:
    """``input -> widths... -> embedding -> logits``.

    Hidden blocks are affine + activation; the embedding block is affine only,
    and the classifier is an affine map from the embedding to the logits.
    """

    def __init__(self, input_dim, widths, embedding_dim, n_classes, activation="tanh", seed=0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.input_dim = int(input_dim)
        self.widths = [int(w) for w in widths]
        self.embedding_dim = int(embedding_dim)
        self.n_classes = int(n_classes)
        self.activation = activation
        self.frozen = False
        self.params = {}
        rng = np.random.default_rng(seed)
        sizes = [self.input_dim] + self.widths + [self.embedding_dim]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(3.0 / fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        bound = np.sqrt(3.0 / self.embedding_dim)
        self.params["Wc"] = rng.uniform(-bound, bound, size=(self.embedding_dim, self.n_classes))
        self.params["bc"] = np.zeros(self.n_classes)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def n_blocks(self):
        return len(self.widths) + 1

    @property
    def backbone_keys(self):
        return [k for i in range(self.n_blocks) for k in (f"W{i}", f"b{i}")]

    @property
    def classifier_keys(self):
        return ["Wc", "bc"]

    def config(self):
        return {
            "input_dim": self.input_dim,
            "widths": self.widths,
            "embedding_dim": self.embedding_dim,
            "n_classes": self.n_classes,
            "activation": self.activation,
        }

    def embed(self, x):
        """Per-layer activations ``[input, hidden..., embedding]`` without caching."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[1]} does not match network input {self.input_dim}")
        acts = [x]
        h = x
        for i in range(self.n_blocks):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_blocks - 1:
                h = _act(self.activation, h)
            acts.append(h)
        return acts

    def forward(self, x):
        """Returns ``(activations, embedding, logits)`` and caches them for :meth:`backward`."""
        acts = self.embed(x)
        z = acts[-1]
        logits = z @ self.params["Wc"] + self.params["bc"]
        self._cache = acts
        return acts, z, logits

    def predict(self, x):
        z = self.embed(x)[-1]
        return np.argmax(z @ self.params["Wc"] + self.params["bc"], axis=1)

    def backward(self, grad_z=None, grad_logits=None):
        """Parameter gradients given upstream gradients at the embedding and/or the logits."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts = self._cache
        z = acts[-1]
        grads = {}
        g = np.zeros_like(z) if grad_z is None else np.array(grad_z, dtype=np.float64)
        if g.shape != z.shape:
            raise ValueError(f"grad_z shape {g.shape} does not match embedding shape {z.shape}")
        if grad_logits is None:
            grads["Wc"] = np.zeros_like(self.params["Wc"])
            grads["bc"] = np.zeros_like(self.params["bc"])
        else:
            gl = np.asarray(grad_logits, dtype=np.float64)
            if gl.shape != (z.shape[0], self.n_classes):
                raise ValueError(f"grad_logits shape {gl.shape} does not match logits")
            grads["Wc"] = z.T @ gl
            grads["bc"] = gl.sum(axis=0)
            g = g + gl @ self.params["Wc"].T
        for i in reversed(range(self.n_blocks)):
            if i < self.n_blocks - 1:
                g = g * _act_grad(self.activation, acts[i + 1])
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads

    def sgd_step(self, grads, lr, momentum=0.9, weight_decay=0.0):
        """Classical momentum: ``v <- m*v + g``; ``theta <- theta - lr*v``."""
        keys = self.classifier_keys if self.frozen else list(self.params)
        for k in keys:
            g = grads[k]
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, expected {self.params[k].shape}")
        for k in keys:
            g = grads[k]
            if weight_decay:
                g = g + weight_decay * self.params[k]
            self.velocity[k] = momentum * self.velocity[k] + g
            self.params[k] = self.params[k] - lr * self.velocity[k]
        return self

    def reset_velocity(self, keys=None):
        for k in keys or list(self.velocity):
            self.velocity[k] = np.zeros_like(self.params[k])

    def backbone_digest(self):
        h = hashlib.sha256()
        for k in self.backbone_keys:
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def freeze_backbone(net):
    """Restrict subsequent SGD steps to the classifier."""
    net.frozen = True
    return net


def unfreeze(net):
    net.frozen = False
    return net


def _digest(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def save_checkpoint(path, net, extra_arrays=None, meta=None):
    """Write parameters, momentum buffers, and run state to a versioned ``.npz``."""
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in net.velocity.items()})
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    header = {
        "version": CHECKPOINT_VERSION,
        "network": net.config(),
        "frozen": net.frozen,
        "meta": meta or {},
        "sha256": _digest(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(network, extra_arrays, meta)``; raises :class:`CheckpointError` on damage."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(npz["__header__"].tobytes().decode())
            arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if _digest(arrays) != header.get("sha256"):
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    cfg = header["network"]
    net = Network(cfg["input_dim"], cfg["widths"], cfg["embedding_dim"], cfg["n_classes"], cfg["activation"])
    for k in net.params:
        net.params[k] = arrays[f"param/{k}"].copy()
        net.velocity[k] = arrays[f"velocity/{k}"].copy()
    net.frozen = bool(header["frozen"])
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return net, extra, header["meta"]
