"""Character and word language models for transcript surprisal features.

An add-k smoothed order-n character model stands in for a trainable LM behind
the same scoring interface: a model trained on mainstream-English text assigns
high surprisal to strings characteristic of other dialects. All surprisals are
natural-log (nats).

Scoring conventions: sentences are flanked by the ``sil`` boundary symbol for
context purposes only; the counted events are exactly the text's own
characters, at training and scoring time alike. Spaces count toward utterance
perplexity but not toward per-word surprisal averages.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

from .alphabet import SIL, Alphabet
from .asr_features import normalize_transcript

_CTX_SEP = "\x1f"

# Closed-class auxiliaries and copulas for the fallback verb tagger.
AUX_COPULA = frozenset({
    "AM", "IS", "ARE", "WAS", "WERE", "BE", "BEEN", "BEING",
    "DO", "DOES", "DID", "DONE", "HAVE", "HAS", "HAD",
    "WILL", "WOULD", "CAN", "COULD", "SHALL", "SHOULD", "MAY", "MIGHT", "MUST",
    "AIN'T", "GONNA", "GOTTA", "WANNA",
})

# Common verb stems for the -S third-person heuristic.
VERB_STEMS = frozenset({
    "RUN", "GO", "COME", "SAY", "GET", "MAKE", "KNOW", "THINK", "SEE", "WANT",
    "LOOK", "USE", "FIND", "GIVE", "TELL", "WORK", "CALL", "TRY", "ASK", "NEED",
    "FEEL", "LEAVE", "PUT", "MEAN", "KEEP", "LET", "TALK", "TURN", "START",
    "SHOW", "HEAR", "PLAY", "MOVE", "LIKE", "LIVE", "BELIEVE", "HAPPEN",
    "WRITE", "SIT", "STAND", "LOSE", "PAY", "MEET", "EAT", "SPEAK", "WALK",
    "HELP", "STAY", "STOP", "READ", "GROW", "OPEN", "WIN", "TAKE", "HOLD",
})

_ING_EXCLUDED = frozenset({
    "THING", "NOTHING", "SOMETHING", "ANYTHING", "EVERYTHING", "MORNING",
    "EVENING", "DURING", "KING", "RING", "SPRING", "STRING", "WING", "SING",
    "BRING", "CEILING", "BUILDING", "WEDDING", "FEELING",
})

_ED_EXCLUDED = frozenset({"RED", "BED", "NEED", "INDEED", "HUNDRED", "WICKED", "SACRED"})

_VERB_TAG = re.compile(r"^(VERB|AUX|VB)", re.IGNORECASE)


class EmptyTextError(ValueError):
    """Scoring requires at least one character."""


@dataclass
class CharLM:
    """Order-n character model with add-k smoothing over a fixed alphabet."""

    order: int
    k: float
    alphabet: Alphabet = field(default_factory=Alphabet)
    counts: dict[tuple[str, ...], dict[str, int]] = field(default_factory=dict)
    context_totals: dict[tuple[str, ...], int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.k <= 0:
            raise ValueError("smoothing k must be > 0")

    def _observe(self, context: tuple[str, ...], symbol: str) -> None:
        slot = self.counts.setdefault(context, {})
        slot[symbol] = slot.get(symbol, 0) + 1
        self.context_totals[context] = self.context_totals.get(context, 0) + 1

    def prob(self, symbol: str, context: tuple[str, ...]) -> float:
        """p(symbol | last order-1 context symbols), add-k smoothed."""
        context = context[-(self.order - 1):] if self.order > 1 else ()
        total = self.context_totals.get(context, 0)
        count = self.counts.get(context, {}).get(symbol, 0)
        return (count + self.k) / (total + self.k * len(self.alphabet))

    def distribution(self, context: tuple[str, ...]) -> list[float]:
        return [self.prob(s, context) for s in self.alphabet.symbols]

    def _symbol_stream(self, text: str) -> list[str]:
        return [self.alphabet.symbols[i] for i in self.alphabet.text_to_indices(text)]

    def neg_logprobs(self, text: str, left_context: str = "") -> list[float]:
        """Per-character -ln p for a normalized text, given optional left text.

        The context window starts padded with ``sil`` and flows across word
        boundaries (spaces are ordinary symbols).
        """
        history = [SIL] * max(self.order - 1, 0)
        history.extend(self._symbol_stream(left_context))
        out = []
        for sym in self._symbol_stream(text):
            out.append(-math.log(self.prob(sym, tuple(history))))
            history.append(sym)
        return out


def train_char_lm(corpus: list[str], alphabet: Alphabet | None = None,
                  order: int = 6, k: float = 0.01) -> CharLM:
    """Accumulate n-gram counts over normalized sentences.

    Sentence starts are padded with ``sil`` context symbols; only the
    sentence's own characters are counted as events, so an order-1 model over
    "AAAB" sees exactly four observations.
    """
    alphabet = alphabet or Alphabet()
    if not corpus:
        raise ValueError("training corpus is empty")
    lm = CharLM(order=order, k=k, alphabet=alphabet)
    pad = [SIL] * max(order - 1, 0)
    for sentence in corpus:
        text = normalize_transcript(sentence, alphabet)
        stream = pad + lm._symbol_stream(text)
        for i in range(len(pad), len(stream)):
            context = tuple(stream[max(0, i - (order - 1)):i]) if order > 1 else ()
            lm._observe(context, stream[i])
    return lm


@dataclass(frozen=True)
class WordVocab:
    words: frozenset[str]
    min_count: int = 2

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)


def train_word_vocab(corpus: list[str], alphabet: Alphabet | None = None,
                     min_count: int = 2) -> WordVocab:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    alphabet = alphabet or Alphabet()
    tally: dict[str, int] = {}
    for sentence in corpus:
        for word in normalize_transcript(sentence, alphabet).split(" "):
            if word:
                tally[word] = tally.get(word, 0) + 1
    words = frozenset(w for w, c in tally.items() if c >= min_count)
    if not words and tally:
        raise ValueError(f"no word reaches min_count={min_count}")
    return WordVocab(words=words, min_count=min_count)


def word_surprisal(lm: CharLM, word: str, left_context: str = "") -> float:
    """Surprisal of a word in nats: sum of its characters' -ln p given history."""
    if not word:
        raise ValueError("word must be nonempty")
    return sum(lm.neg_logprobs(word, left_context))


def utterance_char_ppl(lm: CharLM, text: str) -> float:
    """exp(mean per-character surprisal) over every character, spaces included."""
    if not text:
        raise EmptyTextError("cannot score an empty utterance")
    nll = lm.neg_logprobs(text)
    return math.exp(sum(nll) / len(nll))


def tag_verbs(transcript: str, tags: list[str] | None = None) -> set[int]:
    """Indices of verb tokens; external tags win, else a lexicon fallback.

    The fallback flags closed-class auxiliaries/copulas, -ED and -ING forms
    (with a short exclusion list), and -S forms whose stem is a known verb.
    """
    words = [w for w in transcript.split(" ") if w]
    if tags is not None:
        if len(tags) != len(words):
            raise ValueError(f"{len(tags)} tags for {len(words)} words")
        return {i for i, t in enumerate(tags) if _VERB_TAG.match(t)}
    verbs = set()
    for i, word in enumerate(words):
        if word in AUX_COPULA or word in VERB_STEMS:
            verbs.add(i)
        elif word.endswith("ED") and len(word) > 3 and word not in _ED_EXCLUDED:
            verbs.add(i)
        elif word.endswith("ING") and len(word) > 4 and word not in _ING_EXCLUDED:
            verbs.add(i)
        elif word.endswith("S") and word[:-1] in VERB_STEMS:
            verbs.add(i)
    return verbs


LM_FEATURE_NAMES = (
    "char_ppl",
    "avg_word_surprisal",
    "avg_verb_surprisal",
    "verb_surprisal_ratio",
    "verb_oov_rate",
)


@dataclass(frozen=True)
class LMFeatures:
    char_ppl: float
    avg_word_surprisal: float
    avg_verb_surprisal: float
    verb_surprisal_ratio: float
    verb_oov_rate: float

    def as_vector(self) -> list[float]:
        return [self.char_ppl, self.avg_word_surprisal, self.avg_verb_surprisal,
                self.verb_surprisal_ratio, self.verb_oov_rate]


def lm_features(lm: CharLM, vocab: WordVocab, transcript: str,
                verb_indices: set[int] | None = None) -> LMFeatures:
    """The five LM features for a normalized transcript.

    Utterances without verbs emit 0 for the three verb quantities so the
    feature matrix stays rectangular.
    """
    if not transcript:
        raise EmptyTextError("cannot extract LM features from an empty transcript")
    words = [w for w in transcript.split(" ") if w]
    if verb_indices is None:
        verb_indices = tag_verbs(transcript)

    nll = lm.neg_logprobs(transcript)
    ppl = math.exp(sum(nll) / len(nll))

    # Slice the utterance-level stream so word surprisals share one history.
    surprisals = []
    start = 0
    for word in words:
        surprisals.append(sum(nll[start:start + len(word)]))
        start += len(word) + 1  # skip the separating space

    avg_word = sum(surprisals) / len(surprisals)
    verbs = sorted(i for i in verb_indices if 0 <= i < len(words))
    if verbs:
        avg_verb = sum(surprisals[i] for i in verbs) / len(verbs)
        ratio = avg_verb / avg_word if avg_word > 0 else 0.0
        oov = sum(1 for i in verbs if words[i] not in vocab) / len(verbs)
    else:
        avg_verb = ratio = oov = 0.0
    return LMFeatures(ppl, avg_word, avg_verb, ratio, oov)


def save_char_lm(lm: CharLM, path: str) -> None:
    payload = {
        "version": 1,
        "order": lm.order,
        "k": lm.k,
        "alphabet": list(lm.alphabet.symbols),
        "counts": {_CTX_SEP.join(ctx): dict(sorted(slot.items()))
                   for ctx, slot in sorted(lm.counts.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=True, sort_keys=True)


def load_char_lm(path: str) -> CharLM:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported char LM file version: {payload.get('version')}")
    lm = CharLM(order=payload["order"], k=payload["k"],
                alphabet=Alphabet(tuple(payload["alphabet"])))
    for ctx_key, slot in payload["counts"].items():
        ctx = tuple(ctx_key.split(_CTX_SEP)) if ctx_key else ()
        lm.counts[ctx] = {s: int(c) for s, c in slot.items()}
        lm.context_totals[ctx] = sum(lm.counts[ctx].values())
    return lm


def save_word_vocab(vocab: WordVocab, path: str) -> None:
    payload = {"version": 1, "min_count": vocab.min_count, "words": sorted(vocab.words)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=True, sort_keys=True)


def load_word_vocab(path: str) -> WordVocab:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported vocab file version: {payload.get('version')}")
    return WordVocab(words=frozenset(payload["words"]), min_count=payload["min_count"])
