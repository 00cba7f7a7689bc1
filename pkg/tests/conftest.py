import numpy as np
import pytest
import torch

from pse.audio import AudioClip, write_wav
from pse.corpus import ManifestKind, TextRecord, UtteranceRecord, make_manifest, write_manifest
from pse.synthesis import random_speaker_params, render_toy_speech

torch.set_num_threads(1)


def toy_speech(seed=0, text="the quiet river runs over a stone bridge", speaker=0):
    return AudioClip(render_toy_speech(random_speaker_params(speaker), text, seed))


@pytest.fixture(scope="session")
def speech_clip():
    return toy_speech(seed=3, speaker=5)


@pytest.fixture
def small_corpus(tmp_path):
    """Two speakers of toy speech plus white and hum-like noise, written to disk."""
    rng = np.random.default_rng(0)
    speech, noise = [], []
    for spk in range(2):
        for u in range(3):
            clip = toy_speech(seed=10 * spk + u, speaker=spk,
                              text="a small garden by the harbor in the early morning light")
            rel = f"wav/s{spk}_{u}.wav"
            write_wav(tmp_path / rel, clip)
            speech.append(UtteranceRecord(f"s{spk}_{u}", f"spk{spk}", rel, clip.duration_sec, "tr"))
    for i in range(3):
        t = np.arange(16000 * 3) / 16000
        x = 0.05 * rng.standard_normal(t.size) + 0.05 * np.sin(2 * np.pi * (60 + 40 * i) * t)
        rel = f"wav/n{i}.wav"
        clip = AudioClip(x)
        write_wav(tmp_path / rel, clip)
        noise.append(UtteranceRecord(f"n{i}", "noise", rel, clip.duration_sec, "tr"))
    sm = make_manifest("G_tr", ManifestKind.clean_speech, speech, tmp_path)
    nm = make_manifest("N_tr", ManifestKind.noise, noise, tmp_path)
    write_manifest(sm, tmp_path / "speech.jsonl")
    write_manifest(nm, tmp_path / "noise.jsonl")
    texts = make_manifest("T", ManifestKind.text, [
        TextRecord(f"t{i}", s) for i, s in enumerate([
            "one red lantern", "the sailor sings at dawn", "open the window slowly",
            "bring the basket inside", "a quiet forest path",
        ])
    ], tmp_path)
    write_manifest(texts, tmp_path / "texts.jsonl")
    return tmp_path, sm, nm, texts
