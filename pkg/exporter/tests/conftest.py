import os

import pytest
import torch

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

WORDS = ["the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog",
         "pack", "my", "box", "with", "five", "dozen", "liquor", "jugs",
         "sphinx", "of", "black", "quartz", "judge", "vow", "how", "now",
         "cow", "red", "blue", "green", "runs", "walks"]


@pytest.fixture(scope="session")
def tiny_lm():
    """A randomly initialized 2-layer GPT-2 with a word-level tokenizer.

    Built entirely locally: conformance tests need a real transformers model
    shape, not pretrained weights.
    """
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    vocab = {"[PAD]": 0, "[UNK]": 1, **{w: i + 2 for i, w in enumerate(WORDS)}}
    tok = Tokenizer(WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = Whitespace()
    tokenizer = PreTrainedTokenizerFast(tokenizer_object=tok, pad_token="[PAD]",
                                        unk_token="[UNK]")
    config = GPT2Config(vocab_size=len(vocab), n_positions=32, n_embd=16,
                        n_layer=2, n_head=2, bos_token_id=None,
                        eos_token_id=None, attn_implementation="eager")
    torch.manual_seed(7)
    model = GPT2LMHeadModel(config).eval()
    return model, tokenizer


@pytest.fixture
def text_rows():
    return [
        {"id": "m0", "text": "the quick brown fox jumps over the lazy dog",
         "label": "member", "group": "demo"},
        {"id": "m1", "text": "pack my box with five dozen liquor jugs",
         "label": "member", "group": "demo"},
        {"id": "n0", "text": "sphinx of black quartz judge my vow",
         "label": "nonmember", "group": "demo"},
        {"id": "n1", "text": "how now brown cow", "label": "nonmember",
         "group": "demo"},
    ]
