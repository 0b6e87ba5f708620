"""Sequential network with a chunked training pass and fused BCE-with-logits loss.

The final layer emits one logit per image; probabilities are sigmoid(logit) and
are only materialized for inference. Training works on logits directly so the
loss gradient is the numerically clean ``sigmoid(z) - y``.

Minibatches are processed in fixed-size chunks with parameter gradients
accumulated across chunks. No operation couples samples (batchnorm excepted,
documented on the layer), so the result equals a whole-batch pass up to float
summation order, and the fixed chunk size makes every run with the same seed
bit-identical. Chunking bounds peak activation memory regardless of batch size.

The trailing run of row-independent layers (flatten / dense / activation) is
executed on groups of several chunks at once: its GEMMs repack the big dense
weight matrix per call, so feeding them 4 chunks of rows in one call costs a
quarter of the packing. Chunk contexts for a group are parked on the side until
the group's dense gradient comes back, then each chunk's convolutional backward
runs in order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .layers import Activation, Dense, Flatten, Layer, give_buffer, take_buffer

DEFAULT_CHUNK = 8

# chunks whose conv contexts are held live while their rows share one pass
# through the dense suffix; bounds held memory at group_size x chunk activations
SUFFIX_GROUP_CHUNKS = 4

# layers that treat rows independently and are cheap to run on wider batches
_SUFFIX_TYPES = (Activation, Dense, Flatten)


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy, computed stably from logits."""
    z = z.astype(np.float64, copy=False)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


class Network:
    """Ordered layer stack with seeded init and chunked loss/gradient passes."""

    def __init__(self, layers: list[Layer], chunk_size: int = DEFAULT_CHUNK):
        if not layers:
            raise ValueError("network needs at least one layer")
        self.layers = list(layers)
        self.chunk_size = int(chunk_size)
        self.layers[0].needs_input_grad = False
        split = len(self.layers)
        while split > 0 and isinstance(self.layers[split - 1], _SUFFIX_TYPES):
            split -= 1
        self._suffix_start = split

    def walk(self) -> list[Layer]:
        """Depth-first flattening of composite layers, in execution order."""
        flat: list[Layer] = []

        def visit(layer: Layer) -> None:
            kids = layer.children()
            if kids:
                for kid in kids:
                    visit(kid)
            else:
                flat.append(layer)

        for layer in self.layers:
            visit(layer)
        return flat

    def init_params(self, seed: int) -> None:
        """Seeded init; each leaf layer gets an independent stream keyed by its index."""
        for index, layer in enumerate(self.walk()):
            layer.init_params(np.random.default_rng([seed, index]))

    def params(self):
        out = []
        for i, layer in enumerate(self.walk()):
            for pname, value, grad in layer.params():
                out.append((f"{i}.{layer.name}.{pname}", value, grad))
        return out

    def param_count(self) -> int:
        return sum(int(value.size) for _, value, _ in self.params())

    def zero_grads(self) -> None:
        for layer in self.walk():
            layer.zero_grads()

    def _nodes(self, layers: list[Layer]) -> list[Layer]:
        """Every layer object under ``layers``, composites included."""
        out: list[Layer] = []

        def visit(layer: Layer) -> None:
            out.append(layer)
            for kid in layer.children():
                visit(kid)

        for layer in layers:
            visit(layer)
        return out

    def _prefix_forward_group(self, prefix, nodes, x, s0, s1, train):
        """Chunked forward of ``x[s0:s1]`` through the conv prefix.

        Returns the concatenated prefix output plus, in train mode, each
        chunk's parked contexts.
        """
        mids, ctxs = [], []
        for s in range(s0, s1, self.chunk_size):
            a = np.ascontiguousarray(x[s:min(s + self.chunk_size, s1)])
            for layer in prefix:
                a = layer.forward(a, train)
            mids.append(a)
            if train:
                ctxs.append([node._ctx for node in nodes])
        if not train:
            mid = mids[0] if len(mids) == 1 else np.concatenate(mids, axis=0)
            return mid, ctxs
        # train mode always copies into an owned buffer: chunk outputs stay
        # parked on layer contexts and may be recycled by their backwards
        mid = take_buffer((s1 - s0,) + mids[0].shape[1:], mids[0].dtype)
        o = 0
        for m in mids:
            mid[o:o + len(m)] = m
            o += len(m)
        return mid, ctxs

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        """One logit per row; each row's value is independent of the batch around it.

        Partial trailing groups are zero-padded to the fixed group width so every
        sample flows through identically shaped GEMMs no matter the batch size;
        BLAS edge kernels for ragged shapes can otherwise round differently.
        """
        prefix = self.layers[:self._suffix_start]
        suffix = self.layers[self._suffix_start:]
        group = self.chunk_size * SUFFIX_GROUP_CHUNKS
        out = np.empty(len(x), dtype=np.float32)
        for s0 in range(0, len(x), group):
            s1 = min(s0 + group, len(x))
            xb = x[s0:s1]
            if s1 - s0 < group:
                xb = np.concatenate(
                    [xb, np.zeros((group - (s1 - s0),) + x.shape[1:], x.dtype)], axis=0
                )
            z, _ = self._prefix_forward_group(prefix, (), xb, 0, len(xb), train=False)
            for layer in suffix:
                z = layer.forward(z, train=False)
            out[s0:s1] = z.reshape(-1)[: s1 - s0]
        return out

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.predict_logits(x))

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """One minibatch pass: accumulates grads, returns (mean loss, accuracy).

        Predicted positive means probability >= 0.5, i.e. logit >= 0.
        """
        n = len(x)
        self.zero_grads()
        prefix = self.layers[:self._suffix_start]
        suffix = self.layers[self._suffix_start:]
        nodes = self._nodes(prefix)
        group = self.chunk_size * SUFFIX_GROUP_CHUNKS
        loss_sum = 0.0
        correct = 0
        inv_n = np.float32(1.0 / n)
        for s0 in range(0, n, group):
            s1 = min(s0 + group, n)
            mid, ctxs = self._prefix_forward_group(prefix, nodes, x, s0, s1, train=True)
            z = mid
            for layer in suffix:
                z = layer.forward(z, train=True)
            zf = z.reshape(-1)
            yb = y[s0:s1].astype(np.float32, copy=False)
            loss_sum += float(np.sum(np.logaddexp(0.0, zf.astype(np.float64)) - yb * zf))
            correct += int(np.sum((zf >= 0.0) == (yb > 0.5)))
            d = ((expit(zf) - yb) * inv_n).astype(np.float32).reshape(z.shape)
            for layer in reversed(suffix):
                d = layer.backward(d)
            for j, s in enumerate(range(s0, s1, self.chunk_size)):
                if not prefix:
                    break
                for node, ctx in zip(nodes, ctxs[j]):
                    node._ctx = ctx
                sl = d[s - s0:min(s + self.chunk_size, s1) - s0]
                db = take_buffer(sl.shape, sl.dtype)
                np.copyto(db, sl)
                for layer in reversed(prefix):
                    prev = db
                    db = layer.backward(db)
                    # recycle the consumed gradient unless the layer passed it
                    # through (a view or the gated buffer itself)
                    if db is None or (prev is not db and not np.may_share_memory(prev, db)):
                        give_buffer(prev)
            if prefix and d is not None:
                give_buffer(d)
        for layer in self.walk():
            layer.flush_deferred()
        return loss_sum / n, correct / n

    def evaluate_loss_acc(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        z = self.predict_logits(x)
        yf = y.astype(np.float64, copy=False)
        loss = bce_with_logits(z, yf)
        acc = float(np.mean((z >= 0.0) == (yf > 0.5)))
        return loss, acc

    # -- checkpoint state ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping of all weights and buffers, in layer order."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.walk()):
            for pname, value, _ in layer.params():
                out[f"{i}.{pname}"] = value
            for bname, value in layer.buffers():
                out[f"{i}.{bname}"] = value
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for key, value in own.items():
            src = state[key]
            if src.shape != value.shape:
                raise ValueError(f"state {key}: shape {src.shape} != {value.shape}")
            value[...] = src
