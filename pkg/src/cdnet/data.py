"""Tokenization, sequence layout, and corpus ingestion.

Encoded layout per example (one candidate):

    [CLS] u_1 tokens [SEP] u_2 tokens [SEP] ... response tokens [SEP]

Every position carries the index of the segment it belongs to and the
speaker of that segment; [CLS] rides with the first segment and each
[SEP] with the segment it terminates, so every valid position has
exactly one (segment, speaker) pair. The response is always the final
segment.
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """An input file violates its documented format."""


class MalformedExampleError(ValueError):
    """An example cannot be encoded under the given limits."""


class UnsupportedDialogueError(ValueError):
    """More than two distinct speakers."""


class Vocab:
    """Token/id map with five reserved specials and a '##' subword convention."""

    SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
    PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4

    def __init__(self, tokens=()):
        self._token_to_id = {t: i for i, t in enumerate(self.SPECIALS)}
        self._id_to_token = list(self.SPECIALS)
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token in self._token_to_id:
            return self._token_to_id[token]
        self._token_to_id[token] = len(self._id_to_token)
        self._id_to_token.append(token)
        return self._token_to_id[token]

    def id_of(self, token):
        return self._token_to_id.get(token, self.UNK)

    def has(self, token):
        return token in self._token_to_id

    def token_of(self, idx):
        return self._id_to_token[idx]

    def __len__(self):
        return len(self._id_to_token)

    @property
    def n_specials(self):
        return len(self.SPECIALS)

    @classmethod
    def from_corpus(cls, texts, min_freq=1):
        """Whitespace-token frequency vocab (insertion by first appearance)."""
        counts = {}
        order = []
        for text in texts:
            for tok in text.split():
                if tok not in counts:
                    order.append(tok)
                counts[tok] = counts.get(tok, 0) + 1
        return cls(t for t in order if counts[t] >= min_freq)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self._id_to_token[self.n_specials:]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def _wordpiece(word, vocab):
    """Greedy longest-match split of one word; None when any piece is unknown."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if vocab.has(sub):
                match = sub
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def tokenize(text, vocab, mode="word"):
    """Text -> (token ids, word-boundary flags).

    word mode: whitespace split, unknown tokens -> [UNK].
    subword mode: whitespace words greedily split into known pieces with
    the '##' continuation prefix; a word with no full split -> [UNK].
    Boundary flags mark the first piece of each word.
    """
    ids, bounds = [], []
    for word in text.split():
        if mode == "word":
            ids.append(vocab.id_of(word))
            bounds.append(1)
        elif mode == "subword":
            if vocab.has(word):
                ids.append(vocab.id_of(word))
                bounds.append(1)
                continue
            pieces = _wordpiece(word, vocab)
            if pieces is None:
                ids.append(vocab.UNK)
                bounds.append(1)
            else:
                ids.extend(vocab.id_of(p) for p in pieces)
                bounds.extend([1] + [0] * (len(pieces) - 1))
        else:
            raise ValueError(f"unknown tokenize mode {mode!r}")
    return ids, bounds


@dataclass
class Utterance:
    speaker: int  # 0 = sender, 1 = receiver
    tokens: list
    bounds: list = field(default_factory=list)


@dataclass
class DialogueExample:
    context: list            # of Utterance
    candidates: list         # of (token ids, label)
    task_kind: str           # pointwise | multichoice
    cand_bounds: list = field(default_factory=list)


@dataclass
class EncodedSequence:
    ids: np.ndarray          # int64 [l]
    utt_index: np.ndarray    # int64 [l]
    speaker_index: np.ndarray  # int64 [l]
    valid: np.ndarray        # bool [l]
    bounds: np.ndarray       # bool [l], True at word starts (specials False)
    n_utts: int              # segments including the response

    def n_valid(self):
        return int(self.valid.sum())


def assign_speakers(tags):
    """Resolve per-utterance speakers plus the response speaker.

    tags: one entry per context utterance, a string tag or None. With no
    tags anywhere, speakers strictly alternate starting at 0. Tags map
    to roles by first appearance. The response takes the speaker
    opposite to the last context utterance.
    """
    if any(t is not None for t in tags):
        mapping = {}
        speakers = []
        for t in tags:
            if t is None:
                raise UnsupportedDialogueError("mixed tagged and untagged utterances")
            if t not in mapping:
                if len(mapping) == 2:
                    raise UnsupportedDialogueError(f"more than two speakers: {t!r}")
                mapping[t] = len(mapping)
            speakers.append(mapping[t])
    else:
        speakers = [i % 2 for i in range(len(tags))]
    response = 1 - speakers[-1] if speakers else 0
    return speakers, response


def truncate_longest_first(ctx_tokens, resp_tokens, budget):
    """Trim (context, response) to fit a joint token budget.

    While over budget the longer side loses one token: context from the
    front (oldest content), response from the back; ties trim context.
    """
    if budget < 4:
        raise ValueError(f"budget must be >= 4, got {budget}")
    ctx = list(ctx_tokens)
    resp = list(resp_tokens)
    while len(ctx) + len(resp) > budget:
        if len(ctx) >= len(resp) and ctx:
            ctx.pop(0)
        elif resp:
            resp.pop()
        else:
            break
    return ctx, resp


def encode_example(ex, cand_idx, max_len, max_utts=20):
    """Lay out one (context, candidate) pair as an EncodedSequence.

    Keeps the most recent max_utts context utterances, fits the token
    budget via truncate_longest_first, then pads to exactly max_len.
    """
    if not 0 <= cand_idx < len(ex.candidates):
        raise IndexError(f"candidate index {cand_idx} out of range")
    context = ex.context[-max_utts:]
    resp_tokens = list(ex.candidates[cand_idx][0])
    resp_bounds = list(ex.cand_bounds[cand_idx]) if ex.cand_bounds else [1] * len(resp_tokens)
    if not resp_tokens:
        raise MalformedExampleError("empty response candidate")

    budget = max_len - 1 - (len(context) + 1)  # [CLS], per-segment [SEP]s
    if budget < 4:
        raise MalformedExampleError(
            f"max_len {max_len} leaves budget {budget} for {len(context)} utterances")

    ctx_flat = [tok for u in context for tok in u.tokens]
    ctx_trim, resp_trim = truncate_longest_first(ctx_flat, resp_tokens, budget)
    if not resp_trim:
        raise MalformedExampleError("response empty after truncation")
    resp_bounds = resp_bounds[:len(resp_trim)]

    # Redistribute the trimmed context: tokens vanish from the front,
    # so the oldest utterances shrink first; empty ones drop entirely.
    drop = len(ctx_flat) - len(ctx_trim)
    kept = []
    for u in context:
        bounds = list(u.bounds) if u.bounds else [1] * len(u.tokens)
        if drop >= len(u.tokens):
            drop -= len(u.tokens)
            continue
        toks = u.tokens[drop:] if drop else list(u.tokens)
        bnds = bounds[drop:] if drop else bounds
        drop = 0
        kept.append((u.speaker, toks, bnds))

    resp_speaker = 1 - context[-1].speaker if context else 0

    ids, T, bounds_out = [Vocab.CLS], [0], [0]
    S = [kept[0][0] if kept else resp_speaker]  # [CLS] takes segment 0's speaker
    for seg, (spk, toks, bnds) in enumerate(kept):
        ids.extend(toks)
        ids.append(Vocab.SEP)
        T.extend([seg] * (len(toks) + 1))
        S.extend([spk] * (len(toks) + 1))
        bounds_out.extend(bnds)
        bounds_out.append(0)
    resp_seg = len(kept)
    ids.extend(resp_trim)
    ids.append(Vocab.SEP)
    T.extend([resp_seg] * (len(resp_trim) + 1))
    S.extend([resp_speaker] * (len(resp_trim) + 1))
    bounds_out.extend(resp_bounds)
    bounds_out.append(0)

    n = len(ids)
    if n > max_len:
        raise MalformedExampleError(f"encoded length {n} exceeds max_len {max_len}")
    pad = max_len - n
    arr = lambda xs, fill: np.asarray(xs + [fill] * pad, dtype=np.int64)
    return EncodedSequence(
        ids=arr(ids, Vocab.PAD),
        utt_index=arr(T, 0),
        speaker_index=arr(S, 0),
        valid=np.asarray([True] * n + [False] * pad, dtype=bool),
        bounds=arr(bounds_out, 0).astype(bool),
        n_utts=resp_seg + 1,
    )


def decode_sequence(seq, vocab):
    """Invert encode_example: (context utterances with speakers, response ids)."""
    segments = []
    cur_tokens, cur_seg = [], None
    for i in range(seq.n_valid()):
        tid = int(seq.ids[i])
        if tid == Vocab.CLS:
            continue
        seg = int(seq.utt_index[i])
        if cur_seg is None:
            cur_seg = seg
        if seg != cur_seg:
            cur_seg = seg
        if tid == Vocab.SEP:
            segments.append((int(seq.speaker_index[i]), cur_tokens))
            cur_tokens = []
        else:
            cur_tokens.append(tid)
    context = [Utterance(spk, toks) for spk, toks in segments[:-1]]
    response = segments[-1][1] if segments else []
    return context, response


def load_pointwise_tsv(path, vocab, group_size, mode="word",
                       drop_degenerate_groups=False):
    """Stream groups from a label<TAB>utt...<TAB>response file.

    Each line is one candidate; group_size consecutive lines share a
    context. Yields lists of single-candidate DialogueExamples. A group
    left ragged at EOF or a label outside {0,1} is a FormatError. With
    drop_degenerate_groups, groups whose labels are all equal are
    skipped (the Douban evaluation convention); default keeps everything.
    """
    group = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise FormatError(f"{path}:{ln}: expected >=3 tab-separated fields")
            if fields[0] not in ("0", "1"):
                raise FormatError(f"{path}:{ln}: label must be 0 or 1, got {fields[0]!r}")
            label = int(fields[0])
            utts = []
            for i, text in enumerate(fields[1:-1]):
                toks, bnds = tokenize(text, vocab, mode)
                if toks:
                    utts.append((toks, bnds))
            speakers, _ = assign_speakers([None] * len(utts))
            context = [Utterance(spk, toks, bnds)
                       for spk, (toks, bnds) in zip(speakers, utts)]
            resp, resp_bounds = tokenize(fields[-1], vocab, mode)
            group.append(DialogueExample(context, [(resp, label)], "pointwise",
                                         cand_bounds=[resp_bounds]))
            if len(group) == group_size:
                labels = [ex.candidates[0][1] for ex in group]
                if not (drop_degenerate_groups and len(set(labels)) == 1):
                    yield group
                group = []
    if group:
        raise FormatError(f"{path}: ragged group of {len(group)} lines at EOF")


_SPEAKER_SPLIT = re.compile(r"(?:^|\s)(\w+)\s*:\s")


def parse_tagged_article(article):
    """Split 'f : hi there m : yo' into [(tag, text), ...]."""
    parts = _SPEAKER_SPLIT.split(article)
    # parts = ['', tag, text, tag, text, ...]
    if len(parts) < 3 or parts[0].strip():
        raise FormatError(f"article does not start with a speaker tag: {article[:40]!r}")
    out = []
    for i in range(1, len(parts) - 1, 2):
        out.append((parts[i], parts[i + 1].strip()))
    return out


def load_multichoice_json(path, vocab, mode="word"):
    """Stream DialogueExamples from a JSON-lines multichoice file.

    Records: {"article": "f : ... m : ...", "options": [...],
    "answers": "B"}. The answer letter indexes the options; speaker tags
    map to roles by first appearance.
    """
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{ln}: bad JSON ({e})") from None
            try:
                article, options, answer = rec["article"], rec["options"], rec["answers"]
            except KeyError as e:
                raise FormatError(f"{path}:{ln}: missing field {e}") from None
            if len(options) < 2:
                raise FormatError(f"{path}:{ln}: need >=2 options")
            if not isinstance(answer, str) or len(answer) != 1 \
                    or not "A" <= answer < chr(ord("A") + len(options)):
                raise FormatError(f"{path}:{ln}: answer {answer!r} does not index "
                                  f"{len(options)} options")
            gold = ord(answer) - ord("A")
            tagged = parse_tagged_article(article)
            tags = [t for t, _ in tagged]
            speakers, _ = assign_speakers(tags)
            context = []
            for spk, (_, text) in zip(speakers, tagged):
                toks, bnds = tokenize(text, vocab, mode)
                if toks:
                    context.append(Utterance(spk, toks, bnds))
            cands, cand_bounds = [], []
            for k, opt in enumerate(options):
                toks, bnds = tokenize(opt, vocab, mode)
                cands.append((toks, 1 if k == gold else 0))
                cand_bounds.append(bnds)
            yield DialogueExample(context, cands, "multichoice", cand_bounds=cand_bounds)
