"""GPT-2 reference values that do not need the pretrained weights.

* Tokenizer golden ids from the Hugging Face GPT2Tokenizer loaded from the
  shipped vocab.json / merges.txt.
* The GPT-2-small parameter count from a randomly initialised
  GPT2LMHeadModel(GPT2Config()) (tied unembedding counted once).

usage: python3 gpt2_reference.py TOKENIZER_DIR OUT_JSON
"""

import json
import sys

from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

TEXTS = [
    "",
    "hello world",
    "Diana, Princess of Wales",
    "Saturday Night Live",
    "Back to the Future",
    "Alexander the Great",
    "Red Hot Chili Peppers",
    "Florence and the Machine",
    "The capital of France is",
    "The meaning of X is:",
    "Syria: Country in the Middle East, Leonardo DiCaprio: American actor, Samsung: South Korean multinational corporation, X",
    "  two  spaces\nand a newline\t tab",
    "It's 1985 — they'll say ünïcödé! 東京 🚀",
    "<|endoftext|>",
]


def main(tok_dir, out_path):
    tok = GPT2Tokenizer(f"{tok_dir}/vocab.json", f"{tok_dir}/merges.txt")
    rows = []
    for t in TEXTS:
        ids = tok.encode(t)
        rows.append({
            "text": t,
            "ids": ids,
            "tokens": [tok.decode([i]) for i in ids],
        })
    model = GPT2LMHeadModel(GPT2Config())
    n_params = sum(p.numel() for p in model.parameters())
    cfg = GPT2Config()
    out = {
        "tokenize": rows,
        "gpt2_small": {
            "n_layer": cfg.n_layer, "n_head": cfg.n_head, "n_embd": cfg.n_embd,
            "n_positions": cfg.n_positions, "vocab_size": cfg.vocab_size,
            "parameter_count": n_params,
        },
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, ensure_ascii=False, indent=1)
    print("parameter count", n_params)
    for r in rows:
        print(repr(r["text"][:40]), r["ids"][:12], r["tokens"][-1:])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
