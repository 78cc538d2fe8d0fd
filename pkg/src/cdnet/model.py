"""The channel-decoupling ranking model.

Forward pipeline over an encoded batch:

    toy transformer encoder -> four masked-attention channels (stacked
    blocks chain within a channel) -> one gate per channel pair fusing
    the complementary halves -> per-utterance pooling -> one BiGRU per
    channel -> tanh fusion of the two dialogue vectors -> scalar score.

All parameters live in a ParamStore under dot paths; forward functions
are pure given (params, config, batch).
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import encode_example
from .masks import build_masks_batch
from .optim import ParamStore, uniform_init, zeros_init, ones_init

GATE_VARIANTS = ("full", "no_gate", "no_original_info", "no_original_no_gate")
ABLATIONS = ("both", "utterance_only", "speaker_only")
INTEGRATORS = ("bigru", "max_pool", "mean_pool")
AGGREGATIONS = ("max", "mean")


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 32
    h: int = 2
    encoder_layers: int = 1
    n_decoupling_blocks: int = 1
    n_bigru_layers: int = 1
    aggregation: str = "max"
    integrator: str = "bigru"
    gate_variant: str = "full"
    channel_ablation: str = "both"
    max_len: int = 64
    max_utts: int = 20
    dropout: float = 0.0
    decouple_residual: bool = False

    def __post_init__(self):
        if self.d % self.h != 0:
            raise ValueError(f"d={self.d} not divisible by h={self.h}")
        if self.n_decoupling_blocks < 1 or self.n_bigru_layers < 1:
            raise ValueError("need >=1 decoupling block and >=1 BiGRU layer")
        if self.gate_variant not in GATE_VARIANTS:
            raise ValueError(f"gate_variant must be one of {GATE_VARIANTS}")
        if self.channel_ablation not in ABLATIONS:
            raise ValueError(f"channel_ablation must be one of {ABLATIONS}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Batch:
    ids: np.ndarray        # int64 [N, l]
    utt_index: np.ndarray  # int64 [N, l]
    speaker_index: np.ndarray
    valid: np.ndarray      # bool [N, l]
    n_utts: np.ndarray     # int64 [N]
    allowed: np.ndarray    # bool [N, 4, l, l]


def stack_sequences(seqs):
    """Stack EncodedSequences (equal max_len) into a Batch with masks."""
    ids = np.stack([s.ids for s in seqs])
    T = np.stack([s.utt_index for s in seqs])
    S = np.stack([s.speaker_index for s in seqs])
    valid = np.stack([s.valid for s in seqs])
    n_utts = np.asarray([s.n_utts for s in seqs], dtype=np.int64)
    return Batch(ids, T, S, valid, n_utts, build_masks_batch(T, S, valid))


@dataclass
class ForwardTrace:
    encoder_out: np.ndarray = None
    channels: list = field(default_factory=list)   # C1..C4 (None when ablated)
    gate_ratios: list = field(default_factory=list)  # P1, P2
    fused: list = field(default_factory=list)        # C_u, C_s
    utterances: list = field(default_factory=list)   # L_u, L_s
    dialogue_vectors: list = field(default_factory=list)  # v1, v2
    fused_dialogue: np.ndarray = None                # v
    score: float = None


# ---------------------------------------------------------------------------
# parameters

def _linear_init(store, rng, path, n_in, n_out, bias=True):
    store.add(path + ".w", uniform_init(rng, (n_in, n_out), fan_in=n_in))
    if bias:
        store.add(path + ".b", zeros_init((n_out,)))


def _gate_in_width(variant, d):
    return 4 * d if variant in ("full",) else d


def _build_gate(store, rng, path, d, variant):
    if variant in ("no_gate", "no_original_no_gate"):
        _linear_init(store, rng, f"{path}.fc", 2 * d, d)
        return
    width = _gate_in_width(variant, d)
    _linear_init(store, rng, f"{path}.fc_a", width, d)
    _linear_init(store, rng, f"{path}.fc_b", width, d)
    _linear_init(store, rng, f"{path}.fc_p", 2 * d, d)


def _build_gru(store, rng, path, dx, dh):
    for g in ("z", "r", "h"):
        store.add(f"{path}.w{g}", uniform_init(rng, (dx, dh), fan_in=dx))
        store.add(f"{path}.u{g}", uniform_init(rng, (dh, dh), fan_in=dh))
        store.add(f"{path}.b{g}", zeros_init((dh,)))


def build_encoder_params(store, config, rng):
    d = config.d
    store.add("encoder.tok_emb", uniform_init(rng, (config.vocab_size, d), fan_in=d))
    store.add("encoder.pos_emb", uniform_init(rng, (config.max_len, d), fan_in=d))
    for i in range(config.encoder_layers):
        base = f"encoder.layer{i}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{base}.attn.{name}", uniform_init(rng, (d, d), fan_in=d))
        _linear_init(store, rng, f"{base}.ffn.fc1", d, 4 * d)
        _linear_init(store, rng, f"{base}.ffn.fc2", 4 * d, d)
        for ln in ("ln1", "ln2"):
            store.add(f"{base}.{ln}.g", ones_init((d,)))
            store.add(f"{base}.{ln}.b", zeros_init((d,)))


def build_params(config, rng):
    """All trainable parameters of the ranking model, deterministically."""
    store = ParamStore()
    d = config.d
    build_encoder_params(store, config, rng)
    for b in range(config.n_decoupling_blocks):
        for c in range(4):
            base = f"decouple.block{b}.ch{c}"
            for name in ("wq", "wk", "wv", "wo"):
                store.add(f"{base}.{name}", uniform_init(rng, (d, d), fan_in=d))
            if config.decouple_residual:
                store.add(f"{base}.ln.g", ones_init((d,)))
                store.add(f"{base}.ln.b", zeros_init((d,)))
    _build_gate(store, rng, "gate.utt", d, config.gate_variant)
    _build_gate(store, rng, "gate.spk", d, config.gate_variant)
    if config.integrator == "bigru":
        for ch in ("utt", "spk"):
            for layer in range(config.n_bigru_layers):
                dx = d if layer == 0 else 2 * d
                for dirn in ("fwd", "bwd"):
                    _build_gru(store, rng, f"bigru.{ch}.layer{layer}.{dirn}", dx, d)
    store.add("fusion.w", uniform_init(rng, (d, 4 * d), fan_in=4 * d))
    store.add("fusion.b", zeros_init((d,)))
    _linear_init(store, rng, "clf", d, 1)
    return store


def param_count(config):
    """Closed-form size of the store; guards against silent shape drift."""
    d = config.d
    n = config.vocab_size * d + config.max_len * d
    n += config.encoder_layers * (4 * d * d            # attention
                                  + d * 4 * d + 4 * d  # ffn fc1
                                  + 4 * d * d + d      # ffn fc2
                                  + 4 * d)             # two layer norms
    per_channel = 4 * d * d + (2 * d if config.decouple_residual else 0)
    n += config.n_decoupling_blocks * 4 * per_channel
    if config.gate_variant in ("no_gate", "no_original_no_gate"):
        gate = 2 * d * d + d
    else:
        w = _gate_in_width(config.gate_variant, d)
        gate = 2 * (w * d + d) + 2 * d * d + d
    n += 2 * gate
    if config.integrator == "bigru":
        for layer in range(config.n_bigru_layers):
            dx = d if layer == 0 else 2 * d
            n += 2 * 2 * 3 * (dx * d + d * d + d)  # channels x dirs x gates
    n += d * 4 * d + d        # fusion
    n += d + 1                # classifier
    return n


# ---------------------------------------------------------------------------
# forward pieces

def _linear(params, path, x, transpose_w=False):
    out = ag.matmul(x, params[path + ".w"], transpose_b=transpose_w)
    if path + ".b" in params:
        out = ag.add(out, params[path + ".b"])
    return out


def _mhsa(x, wq, wk, wv, wo, h, allowed):
    """Masked multi-head self-attention; allowed broadcasts over heads."""
    N, l, d = x.shape
    dh = d // h

    def split(t):
        return ag.permute(ag.reshape(t, (N, l, h, dh)), (0, 2, 1, 3))

    q = split(ag.matmul(x, wq))
    k = split(ag.matmul(x, wk))
    v = split(ag.matmul(x, wv))
    scores = ag.scale(ag.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(dh))
    att = ag.masked_softmax(scores, allowed[:, None, :, :])
    out = ag.matmul(att, v)
    out = ag.reshape(ag.permute(out, (0, 2, 1, 3)), (N, l, d))
    return ag.matmul(out, wo)


def encode(params, config, ids, valid, rng=None):
    """Toy transformer encoder; pad rows zeroed after the final layer."""
    N, l = ids.shape
    if l > config.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {config.max_len}")
    pos = ag.index_rows(params["encoder.pos_emb"], np.arange(l))
    x = ag.add(ag.embedding(params["encoder.tok_emb"], ids), pos)
    enc_allowed = valid[:, :, None] & valid[:, None, :]
    for i in range(config.encoder_layers):
        base = f"encoder.layer{i}"
        att = _mhsa(x, params[f"{base}.attn.wq"], params[f"{base}.attn.wk"],
                    params[f"{base}.attn.wv"], params[f"{base}.attn.wo"],
                    config.h, enc_allowed)
        if config.dropout > 0 and rng is not None:
            att = ag.dropout(att, config.dropout, rng)
        x = ag.layer_norm(ag.add(x, att), params[f"{base}.ln1.g"], params[f"{base}.ln1.b"])
        ff = _linear(params, f"{base}.ffn.fc2", ag.relu(_linear(params, f"{base}.ffn.fc1", x)))
        if config.dropout > 0 and rng is not None:
            ff = ag.dropout(ff, config.dropout, rng)
        x = ag.layer_norm(ag.add(x, ff), params[f"{base}.ln2.g"], params[f"{base}.ln2.b"])
    keep = valid[:, :, None].astype(x.dtype)
    return ag.mul(x, Tensor(keep))


def _active_channels(ablation):
    if ablation == "utterance_only":
        return (0, 1)
    if ablation == "speaker_only":
        return (2, 3)
    return (0, 1, 2, 3)


def decouple(params, config, x_out, allowed, block):
    """One decoupling block: four parallel masked self-attentions.

    x_out: dict channel -> input tensor for this block (the encoder
    output for block 0, the channel's own previous output afterwards).
    """
    result = {}
    for c in x_out:
        base = f"decouple.block{block}.ch{c}"
        out = _mhsa(x_out[c], params[f"{base}.wq"], params[f"{base}.wk"],
                    params[f"{base}.wv"], params[f"{base}.wo"],
                    config.h, allowed[:, c])
        if config.decouple_residual:
            out = ag.layer_norm(ag.add(x_out[c], out),
                                params[f"{base}.ln.g"], params[f"{base}.ln.b"])
        result[c] = out
    return result


def gate_fuse(params, path, variant, e0, ca, cb):
    """Fuse two complementary channel outputs; returns (fused, ratio)."""
    if variant in ("no_gate", "no_original_no_gate"):
        return _linear(params, f"{path}.fc", ag.concat_last([ca, cb])), None
    if variant == "full":
        fa = ag.concat_last([e0, ca, ag.sub(e0, ca), ag.mul(e0, ca)])
        fb = ag.concat_last([e0, cb, ag.sub(e0, cb), ag.mul(e0, cb)])
    else:  # no_original_info: every e0-derived slot dropped
        fa, fb = ca, cb
    ea = ag.relu(_linear(params, f"{path}.fc_a", fa))
    eb = ag.relu(_linear(params, f"{path}.fc_b", fb))
    p = ag.sigmoid(_linear(params, f"{path}.fc_p", ag.concat_last([ea, eb])))
    one_minus = ag.sub(Tensor(np.asarray(1.0, dtype=p.dtype)), p)
    return ag.add(ag.mul(p, ca), ag.mul(one_minus, cb)), p


def aggregate(x, utt_index, valid, n_seg, method):
    """Word-level channel output -> per-utterance vectors."""
    return ag.segment_pool(x, utt_index, valid, n_seg, mode=method)


def bigru_channel(params, config, channel, L, lengths):
    """Utterance sequence -> dialogue vector [N, 2d] for one channel."""
    x = L
    hf = hb = None
    for layer in range(config.n_bigru_layers):
        base = f"bigru.{channel}.layer{layer}"

        def run(dirn, reverse):
            p = lambda name: params[f"{base}.{dirn}.{name}"]
            return ag.gru_sequence(x, lengths, p("wz"), p("wr"), p("wh"),
                                   p("uz"), p("ur"), p("uh"),
                                   p("bz"), p("br"), p("bh"), reverse=reverse)

        hf = run("fwd", False)
        hb = run("bwd", True)
        x = ag.concat_last([hf, hb])
    T = L.shape[1]
    return ag.concat_last([ag.select_position(hf, T - 1), ag.select_position(hb, 0)])


def _pool_integrator(L, utt_valid, mode):
    pooled = ag.segment_pool(L, np.zeros_like(utt_valid, dtype=np.int64),
                             utt_valid, 1, mode=mode)
    flat = ag.reshape(pooled, (L.shape[0], L.shape[2]))
    return ag.concat_last([flat, flat])  # keep the 2d slot width of the BiGRU


def integrate(params, config, channel, L, lengths, utt_valid):
    if config.integrator == "bigru":
        return bigru_channel(params, config, channel, L, lengths)
    mode = "max" if config.integrator == "max_pool" else "mean"
    return _pool_integrator(L, utt_valid, mode)


def fuse_and_score(params, v1, v2, task_kind):
    """Dialogue vectors -> pointwise probability or multichoice logit."""
    v = ag.tanh(ag.add(ag.matmul(ag.concat_last([v1, v2]), params["fusion.w"],
                                 transpose_b=True),
                       params["fusion.b"]))
    logit = ag.reshape(_linear(params, "clf", v), (v.shape[0],))
    if task_kind == "pointwise":
        return ag.sigmoid(logit), v
    return logit, v


def forward_batch(params, config, batch, task_kind, rng=None, trace=None):
    """Score every sequence in the batch; optionally fill a ForwardTrace."""
    E = encode(params, config, batch.ids, batch.valid, rng)
    channels = {c: E for c in _active_channels(config.channel_ablation)}
    for b in range(config.n_decoupling_blocks):
        channels = decouple(params, config, channels, batch.allowed, b)

    fused = []
    ratios = []
    if config.channel_ablation in ("both", "utterance_only"):
        cu, p1 = gate_fuse(params, "gate.utt", config.gate_variant,
                           E, channels[0], channels[1])
        fused.append(cu)
        ratios.append(p1)
    if config.channel_ablation in ("both", "speaker_only"):
        cs, p2 = gate_fuse(params, "gate.spk", config.gate_variant,
                           E, channels[2], channels[3])
        fused.append(cs)
        ratios.append(p2)

    n_seg = int(batch.n_utts.max())
    utt_valid = np.arange(n_seg)[None, :] < batch.n_utts[:, None]
    names = {"both": ("utt", "spk"), "utterance_only": ("utt",),
             "speaker_only": ("spk",)}[config.channel_ablation]
    pooled = [aggregate(c, batch.utt_index, batch.valid, n_seg, config.aggregation)
              for c in fused]
    vectors = [integrate(params, config, name, L, batch.n_utts, utt_valid)
               for name, L in zip(names, pooled)]
    if len(vectors) == 1:  # single-channel ablation: duplicate to keep shapes
        vectors = [vectors[0], vectors[0]]
    scores, v = fuse_and_score(params, vectors[0], vectors[1], task_kind)

    if trace is not None:
        trace.encoder_out = E.data.copy()
        trace.channels = [channels[c].data.copy() if c in channels else None
                          for c in range(4)]
        trace.gate_ratios = [p.data.copy() if p is not None else None for p in ratios]
        trace.fused = [c.data.copy() for c in fused]
        trace.utterances = [L.data.copy() for L in pooled]
        trace.dialogue_vectors = [vv.data.copy() for vv in vectors]
        trace.fused_dialogue = v.data.copy()
    return scores


def forward_example(ex, cand_idx, params, config, want_trace=False):
    """Score one candidate of one example; optionally return a trace."""
    seq = encode_example(ex, cand_idx, config.max_len, config.max_utts)
    batch = stack_sequences([seq])
    trace = ForwardTrace() if want_trace else None
    with ag.no_grad():
        scores = forward_batch(params, config, batch, ex.task_kind, trace=trace)
    score = float(scores.data[0])
    if want_trace:
        trace.score = score
        return score, trace
    return score
