"""Build the random-weight toy GPT-2 fixture used by the Rust test suites.

Writes config.json, model.safetensors, vocab.json and merges.txt into the
given directory. The tokenizer is a small byte-level BPE trained here on a
short English corpus; the weights come from a seeded torch RNG. Tensor names
and layouts follow the Hugging Face GPT-2 checkpoint conventions.

usage: python3 make_toy_model.py OUT_DIR
"""

import collections
import json
import pathlib
import sys

import regex
import torch
from safetensors.torch import save_file

CORPUS = """
Diana, Princess of Wales was a member of the British royal family.
Back to the Future is a 1985 science fiction film directed by Robert Zemeckis.
Saturday Night Live is a live television variety show broadcast from New York.
Alexander the Great was an ancient Greek king of Macedon who built an empire.
Red Hot Chili Peppers are a rock band formed in Los Angeles, California.
Florence and the Machine are an English indie rock band from London.
The capital of France is Paris. The capital of Italy is Rome.
The meaning of X is: a short description of the thing that X refers to.
Syria: Country in the Middle East. Leonardo DiCaprio: American actor.
Samsung: South Korean multinational corporation. hello world, hello there.
The quick brown fox jumps over the lazy dog while the band plays music.
A king, a queen and a princess lived in the palace of the royal family.
"""

PAT = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)

N_MERGES = 240
CONFIG = dict(n_layer=4, n_head=4, n_embd=32, n_positions=128)
SEED = 20240611


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def train_merges(text, n_merges):
    enc = bytes_to_unicode()
    words = collections.Counter(
        tuple(enc[b] for b in piece.encode("utf-8")) for piece in PAT.findall(text)
    )
    merges = []
    for _ in range(n_merges):
        pairs = collections.Counter()
        for word, count in words.items():
            for a, b in zip(word, word[1:]):
                pairs[(a, b)] += count
        if not pairs:
            break
        # deterministic: highest count, then lexicographic
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = {}
        for word, count in words.items():
            out = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    out.append(word[i] + word[i + 1])
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            merged[tuple(out)] = merged.get(tuple(out), 0) + count
        words = merged
    return merges


def main(out_dir):
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    merges = train_merges(CORPUS, N_MERGES)
    vocab = {}
    for ch in bytes_to_unicode().values():
        vocab[ch] = len(vocab)
    for a, b in merges:
        if a + b not in vocab:
            vocab[a + b] = len(vocab)
    vocab["<|endoftext|>"] = len(vocab)
    vocab_size = len(vocab)

    (out / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False))
    with open(out / "merges.txt", "w", encoding="utf-8") as fh:
        fh.write("#version: 0.2\n")
        for a, b in merges:
            fh.write(f"{a} {b}\n")

    config = dict(CONFIG, vocab_size=vocab_size, layer_norm_epsilon=1e-5,
                  activation_function="gelu_new", model_type="gpt2",
                  bos_token_id=vocab_size - 1, eos_token_id=vocab_size - 1)
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")

    d = CONFIG["n_embd"]
    g = torch.Generator().manual_seed(SEED)

    def randn(*shape, std):
        return (torch.randn(*shape, generator=g) * std).contiguous()

    tensors = {
        "wte.weight": randn(vocab_size, d, std=0.5),
        "wpe.weight": randn(CONFIG["n_positions"], d, std=0.2),
        "ln_f.weight": 1.0 + randn(d, std=0.1),
        "ln_f.bias": randn(d, std=0.1),
    }
    for layer in range(CONFIG["n_layer"]):
        p = f"h.{layer}."
        tensors.update({
            p + "ln_1.weight": 1.0 + randn(d, std=0.1),
            p + "ln_1.bias": randn(d, std=0.1),
            p + "attn.c_attn.weight": randn(d, 3 * d, std=0.4),
            p + "attn.c_attn.bias": randn(3 * d, std=0.1),
            p + "attn.c_proj.weight": randn(d, d, std=0.3),
            p + "attn.c_proj.bias": randn(d, std=0.1),
            p + "ln_2.weight": 1.0 + randn(d, std=0.1),
            p + "ln_2.bias": randn(d, std=0.1),
            p + "mlp.c_fc.weight": randn(d, 4 * d, std=0.4),
            p + "mlp.c_fc.bias": randn(4 * d, std=0.1),
            p + "mlp.c_proj.weight": randn(4 * d, d, std=0.2),
            p + "mlp.c_proj.bias": randn(d, std=0.1),
        })
    save_file(tensors, str(out / "model.safetensors"), metadata={"format": "pt"})
    print(f"wrote toy model: vocab={vocab_size} merges={len(merges)} -> {out}")


if __name__ == "__main__":
    main(sys.argv[1])
