"""Reference outputs for the toy GPT-2 fixture, computed with Hugging Face
transformers (an implementation independent of the Rust engine).

Records tokenizations, last-position logits, a full activation trace,
greedy continuations and patched greedy continuations into one JSON file.

usage: python3 toy_reference.py TOY_DIR OUT_JSON
"""

import json
import sys

import torch
from transformers import GPT2LMHeadModel, GPT2Tokenizer

TEXTS = [
    "",
    "hello world",
    "Diana, Princess of Wales",
    "Saturday Night Live",
    "The meaning of X is:",
    "  two  spaces\nand a newline\t tab",
    "It's 1985 — they'll say ünïcödé!",
]
FORWARD_PROMPTS = [
    "The capital of France is",
    "Diana, Princess of Wales",
    "Red Hot Chili Peppers",
]
TRACE_PROMPT = "Alexander the Great"
GREEDY_PROMPTS = ["The capital of France is", "Back to the Future", "hello"]
GREEDY_NEW = 12

# (source prompt, kind, layer, alpha, target prompt template, target layer)
PATCH_CASES = [
    ("Diana, Princess of Wales", "mlp", 2, 6.0, "Syria: Country in the Middle East. The meaning of {} is", 0),
    ("Diana, Princess of Wales", "mlp", 2, 6.0, "Syria: Country in the Middle East. The meaning of {} is", 2),
    ("Saturday Night Live", "hidden", 3, 12.0, "The meaning of {} is:", 3),
    ("Red Hot Chili Peppers", "premlp", 1, 3.0, "{}", 1),
    ("Back to the Future", "hidden", 0, 9.0, "hello {} world", 1),
]
PATCH_NEW = 10


def load(toy_dir):
    tok = GPT2Tokenizer(f"{toy_dir}/vocab.json", f"{toy_dir}/merges.txt")
    model = GPT2LMHeadModel.from_pretrained(toy_dir, attn_implementation="eager")
    model.eval()
    return tok, model


def capture(model, ids):
    """Run one forward pass and collect hidden / pre-MLP / MLP-output rows."""
    tr = model.transformer
    hidden, pre, mlp = {}, {}, {}
    handles = [tr.drop.register_forward_hook(lambda m, i, o: hidden.__setitem__(0, o[0].clone()))]
    for li, block in enumerate(tr.h):
        handles.append(block.register_forward_hook(
            lambda m, i, o, li=li: hidden.__setitem__(li + 1, o[0].clone())))
        handles.append(block.ln_2.register_forward_pre_hook(
            lambda m, i, li=li: pre.__setitem__(li + 1, i[0][0].clone())))
        handles.append(block.mlp.register_forward_hook(
            lambda m, i, o, li=li: mlp.__setitem__(li + 1, o[0].clone())))
    with torch.no_grad():
        logits = model(torch.tensor([ids])).logits[0]
    for h in handles:
        h.remove()
    n_layer = len(tr.h)
    return (
        logits,
        torch.stack([hidden[l] for l in range(n_layer + 1)]),
        torch.stack([pre[l] for l in range(1, n_layer + 1)]),
        torch.stack([mlp[l] for l in range(1, n_layer + 1)]),
    )


def greedy(model, ids, new_tokens, eot, patch=None):
    """Cached greedy decoding; `patch` = (layer, index0, vector) applied on the prompt pass."""
    tr = model.transformer
    handle = None
    if patch is not None:
        layer, idx, vec = patch
        module = tr.drop if layer == 0 else tr.h[layer - 1]
        fired = {"n": 0}

        def hook(m, i, o):
            if o.shape[1] > idx and fired["n"] == 0:
                o = o.clone()
                o[0, idx] = vec
                fired["n"] += 1
                return o
            return None

        handle = module.register_forward_hook(hook)
    out = list(ids)
    past = None
    step_input = torch.tensor([ids])
    margins = []
    with torch.no_grad():
        for _ in range(new_tokens):
            res = model(step_input, past_key_values=past, use_cache=True)
            past = res.past_key_values
            last = res.logits[0, -1]
            top = torch.topk(last, 2)
            margins.append(float(top.values[0] - top.values[1]))
            nxt = int(torch.argmax(last))
            out.append(nxt)
            if nxt == eot:
                break
            step_input = torch.tensor([[nxt]])
    if handle is not None:
        handle.remove()
    return out[len(ids):], min(margins) if margins else None


def placeholder(tok, template):
    prefix, suffix = template.split("{}")
    text = prefix + "X" + suffix
    ids = tok.encode(text)
    x_char = len(prefix)
    pos = 0
    for k in range(len(ids)):
        if len(tok.decode(ids[: k + 1])) > x_char:
            pos = k
            break
    return text, ids, pos


def main(toy_dir, out_path):
    tok, model = load(toy_dir)
    eot = tok.convert_tokens_to_ids("<|endoftext|>")
    out = {"eot": eot}

    out["tokenize"] = [{"text": t, "ids": tok.encode(t)} for t in TEXTS]

    out["forward"] = []
    for p in FORWARD_PROMPTS:
        ids = tok.encode(p)
        logits, *_ = capture(model, ids)
        out["forward"].append({
            "prompt": p,
            "ids": ids,
            "last_logits": logits[-1].tolist(),
            "argmax": int(torch.argmax(logits[-1])),
        })

    ids = tok.encode(TRACE_PROMPT)
    _, hidden, pre, mlp = capture(model, ids)
    out["trace"] = {
        "prompt": TRACE_PROMPT,
        "ids": ids,
        "hidden": hidden.tolist(),
        "pre_mlp": pre.tolist(),
        "mlp_out": mlp.tolist(),
    }

    out["greedy"] = []
    for p in GREEDY_PROMPTS:
        ids = tok.encode(p)
        new, margin = greedy(model, ids, GREEDY_NEW, eot)
        out["greedy"].append({"prompt": p, "max_new_tokens": GREEDY_NEW,
                              "new_ids": new, "min_margin": margin})

    out["patch"] = []
    for src, kind, layer, alpha, template, target_layer in PATCH_CASES:
        src_ids = tok.encode(src)
        _, hidden, pre, mlp = capture(model, src_ids)
        if kind == "hidden":
            vec = hidden[layer, -1]
        elif kind == "premlp":
            vec = pre[layer - 1, -1]
        else:
            vec = mlp[layer - 1, -1]
        vec = vec * alpha
        text, tgt_ids, pos = placeholder(tok, template)
        new, margin = greedy(model, tgt_ids, PATCH_NEW, eot, patch=(target_layer, pos, vec))
        base, _ = greedy(model, tgt_ids, PATCH_NEW, eot)
        out["patch"].append({
            "source_prompt": src, "kind": kind, "layer": layer, "alpha": alpha,
            "target_prompt": template, "target_layer": target_layer,
            "target_ids": tgt_ids, "placeholder_position": pos + 1,
            "max_new_tokens": PATCH_NEW,
            "patched_new_ids": new, "baseline_new_ids": base, "min_margin": margin,
        })

    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, ensure_ascii=False)
    for g in out["greedy"] + out["patch"]:
        print("min margin", g["min_margin"])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
