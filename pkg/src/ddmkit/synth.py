"""Synthetic acceptance corpus.

Generates a complete fixture: manifest, 16 kHz audio, posterior matrices, an
x-vector table, a paralinguistic table, an LM training corpus, and a ready
config. Dialect density annotations are a noisy deterministic function of
planted signals so the full pipeline has something real to recover:

  * phonological markers (apostrophe/D- forms) raise specific bigram rates,
  * pseudo-verb tokens absent from the LM corpus drive verb OOV and surprisal,
  * blank-run lengths in the posteriors scale with the dialect level,
  * per-city F0 bases, vibrato rates, and voicing duty cycles mark the audio,
  * two table columns carry the dialect level and city directly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .asr_features import PosteriorMatrix, write_posterior_file
from .alphabet import Alphabet
from .audio import write_wav_pcm16
from .corpus import CITY_ORDER, XVECTOR_DIM
from .seeds import substream_rng

SAMPLE_RATE = 16000

CITY_DIALECT_BASE = {"DCB": 0.45, "ROC": 0.15, "PRV": 0.80, "LES": 0.10, "VLD": 0.62}
CITY_F0_BASE = {"DCB": 105.0, "ROC": 123.0, "PRV": 141.0, "LES": 159.0, "VLD": 177.0}
CITY_VIBRATO_HZ = {"DCB": 2.0, "ROC": 3.5, "PRV": 5.0, "LES": 6.5, "VLD": 8.0}
CITY_DUTY = {"DCB": 0.95, "ROC": 0.85, "PRV": 0.75, "LES": 0.65, "VLD": 0.55}

GAE_FILLERS = (
    "I YOU HE SHE WE THEY THE A AND BUT OR TO OF IN ON AT WITH FROM FOR ABOUT "
    "HOUSE SCHOOL STREET PEOPLE FRIEND FAMILY MOTHER FATHER BROTHER SISTER "
    "CHILD TIME YEAR DAY NIGHT TOWN CITY PLACE WATER FOOD MUSIC STORY WORD "
    "THING WAY LIFE HAND EYE DOOR CAR ROAD TREE RIVER GOOD BIG SMALL OLD NEW "
    "LONG LITTLE RIGHT NICE FINE HOME BOOK TABLE CHAIR LIGHT PAPER GARDEN"
).split()

GAE_VERBS = (
    "GO COME SAY GET MAKE KNOW THINK SEE WANT LOOK USE FIND GIVE TELL CALL "
    "TRY ASK NEED FEEL LEAVE PUT KEEP LET TALK TURN START SHOW HEAR PLAY MOVE "
    "LIKE LIVE WALK EAT SPEAK RUN HELP STAY STOP READ"
).split()

PHON_MARKERS = (
    "GOIN' DOIN' RUNNIN' TALKIN' WALKIN' NOTHIN' SOMETHIN' DIS DAT DEM DEY "
    "WIT' OVA NUMBA BRUDDA"
).split()

OOV_VERBS = (
    "GLORPED FLARNED BLICKED SNARFED QUIMMED ZARPED GRUNKED PLIMMED "
    "GLORPING FLARNING BLICKING SNARFING"
).split()

_PH_FRACTION = 0.40  # planted phonological markers per word at dialect level 1
_MS_FRACTION = 0.25  # planted pseudo-verbs per word at dialect level 1
_ANNOTATION_FLIP = 0.10  # chance of a +/-1 miscount per component


def _sentence(rng: np.random.Generator, n_words: int) -> str:
    words = list(rng.choice(GAE_FILLERS, size=n_words - 2))
    words.insert(int(rng.integers(n_words - 1)), str(rng.choice(GAE_VERBS)))
    words.insert(int(rng.integers(n_words)), str(rng.choice(GAE_VERBS)))
    return " ".join(words)


def _dialect_transcript(rng: np.random.Generator, level: float,
                        n_words: int) -> tuple[str, list[str], int, int]:
    """Transcript with planted markers; returns (text, tags, n_ph, n_ms)."""
    n_ph = int(round(_PH_FRACTION * level * n_words))
    n_ms = int(round(_MS_FRACTION * level * n_words))
    n_verbs = 2
    n_ph = min(n_ph, n_words - n_ms - n_verbs - 2)
    n_ph = max(n_ph, 0)
    n_fill = n_words - n_ph - n_ms - n_verbs

    tokens = [("PH", str(w)) for w in rng.choice(PHON_MARKERS, size=n_ph)]
    tokens += [("MS", str(w)) for w in rng.choice(OOV_VERBS, size=n_ms)]
    tokens += [("V", str(w)) for w in rng.choice(GAE_VERBS, size=n_verbs)]
    tokens += [("F", str(w)) for w in rng.choice(GAE_FILLERS, size=n_fill)]
    rng.shuffle(tokens)
    words = [w for _, w in tokens]
    tags = ["VERB" if kind in ("MS", "V") else "NOUN" for kind, _ in tokens]
    return " ".join(words), tags, n_ph, n_ms


def _noisy_count(rng: np.random.Generator, count: int, n_words: int) -> int:
    roll = rng.random()
    if roll < _ANNOTATION_FLIP:
        count -= 1
    elif roll < 2 * _ANNOTATION_FLIP:
        count += 1
    return int(min(max(count, 0), n_words))


def _synth_audio(rng: np.random.Generator, city: str, level: float,
                 duration_s: float) -> np.ndarray:
    """Voiced harmonic stacks with city-coded F0 base, vibrato, and duty cycle."""
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    f0 = CITY_F0_BASE[city] + 40.0 * level + rng.normal(0.0, 1.5)
    vibrato = 1.0 + 0.05 * np.sin(2 * np.pi * CITY_VIBRATO_HZ[city] * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / SAMPLE_RATE
    x = np.zeros(n)
    for k, amp in ((1, 1.0), (2, 0.5), (3, 0.33), (4, 0.25), (5, 0.2)):
        x += amp * np.sin(k * phase)
    x /= np.abs(x).max()

    # voicing gate: on/off segments at the city's duty cycle
    gate = np.zeros(n)
    seg = int(0.20 * SAMPLE_RATE)
    pos = 0
    while pos < n:
        on = int(seg * CITY_DUTY[city] * (0.8 + 0.4 * rng.random()))
        gate[pos:pos + on] = 1.0
        pos += seg
    # short fades to avoid clicks
    ramp = np.minimum(1.0, np.arange(n) / (0.01 * SAMPLE_RATE))
    x = 0.35 * x * gate * ramp[::-1] * ramp
    x += rng.normal(0.0, 0.002, size=n)
    return np.clip(x, -1.0, 1.0)


def _synth_posterior(rng: np.random.Generator, transcript: str, level: float,
                     alphabet: Alphabet) -> PosteriorMatrix:
    """Frame scores whose greedy decode reproduces the transcript exactly.

    Blank (`sil`) run lengths grow with the dialect level, planting the
    duration signal reported by the blank-duration feature.
    """
    sil = alphabet.sil_index
    sil_run = 2 + int(round(6 * level))
    frames: list[tuple[int, int]] = [(sil, sil_run + int(rng.integers(0, 2)))]
    prev = sil
    for ch in transcript:
        sym = alphabet.char_to_index[ch]
        if sym == prev:
            frames.append((sil, 1))  # separate repeated symbols for the decode
        frames.append((sym, int(rng.integers(2, 5))))
        prev = sym
        if ch == " " and rng.random() < 0.35:
            frames.append((sil, sil_run))
            prev = sil
    if prev != sil:
        frames.append((sil, sil_run))

    n_frames = sum(c for _, c in frames)
    values = rng.uniform(0.0, 0.8, size=(n_frames, len(alphabet)))
    row = 0
    for sym, count in frames:
        values[row:row + count, sym] = 6.0 + rng.uniform(0.0, 1.0, size=count)
        row += count
    return PosteriorMatrix(values=values, frame_stride_s=0.02)


def _xvector(rng: np.random.Generator, city_idx: int, level: float) -> np.ndarray:
    v = rng.normal(0.0, 0.3, size=XVECTOR_DIM)
    v[city_idx] += 1.5
    v[5] += 1.5 * level
    return v


_CONFIG_TOML = """\
seed = 0
importance = "shap"

[paths]
manifest = "manifest.jsonl"
lm_corpus = "lm_corpus.txt"
xvector_table = "xvectors.csv"
compare_table = "compare.csv"
out_dir = "out"

[lm]
order = 5
k = 0.01
min_count = 2

[fc_train]
epochs = 15
learning_rate = 0.02

[cnn_train]
epochs = 25
learning_rate = 0.05
batch_size = 16

[gbt]
n_rounds = 150
early_stopping_rounds = 15

[split]
fractions = [0.70, 0.15, 0.15]

[eval]
n_iter = 200
test_fraction = 0.2
"""


def generate_fixture(out_dir: str, n_speakers: int = 20, scored_per_speaker: int = 10,
                     pool_per_speaker: int = 6, n_compare_cols: int = 64,
                     lm_sentences: int = 1200, seed: int = 0) -> dict:
    """Write the full synthetic corpus; returns counts for reporting."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "posteriors").mkdir(parents=True, exist_ok=True)
    alphabet = Alphabet()

    rng_corpus = substream_rng(seed, "synth-lm-corpus")
    sentences = [_sentence(rng_corpus, int(rng_corpus.integers(8, 15)))
                 for _ in range(lm_sentences)]
    (out / "lm_corpus.txt").write_text("\n".join(sentences) + "\n", encoding="utf-8")

    cities = [c.value for c in CITY_ORDER]
    speakers = []
    rng_spk = substream_rng(seed, "synth-speakers")
    for i in range(n_speakers):
        city = cities[i % len(cities)]
        delta = float(np.clip(CITY_DIALECT_BASE[city] + rng_spk.uniform(-0.10, 0.10),
                              0.02, 0.95))
        speakers.append((f"spk{i:03d}", city, delta))

    manifest_lines: list[str] = []
    xvector_rows: list[str] = []
    compare_rows: list[str] = []
    compare_names = [f"cmp_{i:03d}" for i in range(n_compare_cols)]
    n_scored = n_pool = n_decoy = 0

    def emit(uid: str, speaker: str, city: str, level: float, scored: bool,
             rng: np.random.Generator, interrupted: bool = False,
             n_words_range: tuple[int, int] = (18, 30)) -> None:
        nonlocal n_scored, n_pool
        n_words = int(rng.integers(*n_words_range))
        text, tags, n_ph, n_ms = _dialect_transcript(rng, level, n_words)
        audio_path = f"audio/{uid}.wav"  # manifest paths are fixture-relative
        write_wav_pcm16(str(out / audio_path),
                        _synth_audio(rng, city, level, 1.4 + 0.4 * rng.random()),
                        SAMPLE_RATE)
        post_path = f"posteriors/{uid}.post"
        write_posterior_file(str(out / post_path), _synth_posterior(rng, text, level, alphabet))

        city_idx = cities.index(city)
        xv = _xvector(rng, city_idx, level)
        xvector_rows.append(",".join([uid] + [repr(float(v)) for v in xv]))
        cmp_vec = rng.normal(0.0, 1.0, size=n_compare_cols)
        cmp_vec[0] = 2.0 * level + rng.normal(0.0, 0.10)
        cmp_vec[1] = 0.5 * city_idx + rng.normal(0.0, 0.15)
        compare_rows.append(",".join([uid] + [repr(float(v)) for v in cmp_vec]))

        obj = {"id": uid, "speaker": speaker, "city": city,
               "audio": audio_path, "transcript": text,
               "posteriors": post_path, "xvector_id": uid, "compare_id": uid,
               "pos_tags": tags}
        if scored:
            obj["n_ph"] = _noisy_count(rng, n_ph, n_words)
            obj["n_ms"] = _noisy_count(rng, n_ms, n_words)
            obj["n_words"] = n_words
            n_scored += 1
        else:
            n_pool += 1
        if interrupted:
            obj["interrupted"] = True
        manifest_lines.append(json.dumps(obj))

    for spk, city, delta in speakers:
        rng = substream_rng(seed, f"synth-{spk}")
        for u in range(scored_per_speaker):
            level = float(np.clip(delta + rng.uniform(-0.05, 0.05), 0.0, 1.0))
            emit(f"{spk}_s{u:02d}", spk, city, level, scored=True, rng=rng)
        for u in range(pool_per_speaker):
            level = float(np.clip(delta + rng.uniform(-0.05, 0.05), 0.0, 1.0))
            emit(f"{spk}_p{u:02d}", spk, city, level, scored=False, rng=rng)

    # a few rows the weak-label filter must reject: interrupted or too short
    rng = substream_rng(seed, "synth-decoys")
    for i, (spk, city, delta) in enumerate(speakers[:4]):
        uid = f"{spk}_x{i:02d}"
        if i % 2 == 0:
            emit(uid, spk, city, delta, scored=False, rng=rng, interrupted=True)
        else:
            emit(uid, spk, city, delta, scored=False, rng=rng, n_words_range=(5, 9))
        n_pool -= 1
        n_decoy += 1

    (out / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    (out / "xvectors.csv").write_text(
        "\n".join([",".join(["id"] + [f"x{i:03d}" for i in range(XVECTOR_DIM)])]
                  + xvector_rows) + "\n", encoding="utf-8")
    (out / "compare.csv").write_text(
        "\n".join([",".join(["id"] + compare_names)] + compare_rows) + "\n",
        encoding="utf-8")
    (out / "config.toml").write_text(_CONFIG_TOML, encoding="utf-8")
    return {"speakers": n_speakers, "scored": n_scored, "pool": n_pool,
            "decoys": n_decoy, "lm_sentences": lm_sentences}
