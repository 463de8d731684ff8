"""Small frozen-encoder task shared by the eval, trainer and acceptance tests."""

from dataclasses import dataclass

from prefixsub.data import TASK_SCHEMAS, SyntheticLanguage, build_fewshot_splits, generate_synthetic_task
from prefixsub.evaluation import EncodedSplit, encode_examples
from prefixsub.model import Encoder, ModelConfig, freeze_base, pretrain_toy
from prefixsub.tokenizer import SPECIAL_TOKENS, Vocab, tokenize

VOCAB_WORDS = 60


@dataclass
class TinyTask:
    encoder: Encoder
    vocab: Vocab
    train: EncodedSplit
    val: EncodedSplit
    test: EncodedSplit


def tiny_task(kind="keyword-presence", k=40, size=200, d_model=16, num_layers=2, seed=0, noise=0.0,
              pretrain_steps=0) -> TinyTask:
    lang = SyntheticLanguage(VOCAB_WORDS, seed=seed)
    vocab = Vocab(list(SPECIAL_TOKENS) + lang.words)
    cfg = ModelConfig(vocab_size=len(vocab), num_layers=num_layers, d_model=d_model, num_heads=2,
                      d_ff=2 * d_model, max_seq_len=40, prefix_len=2)
    encoder = Encoder(cfg, seed=seed)
    if pretrain_steps:
        sentences = [tokenize(t, None, vocab, cfg.max_seq_len) for t in lang.corpus(300, seed=seed)]
        pretrain_toy(encoder, sentences, steps=pretrain_steps, seed=seed, lr=3e-3)
    freeze_base(encoder)
    schema = TASK_SCHEMAS[kind]
    corpus = generate_synthetic_task(kind, size, vocab_size=VOCAB_WORDS, noise=noise, seed=seed)
    split = build_fewshot_splits(corpus, k, 1, seed, task=kind)[0]
    train, val, test = (encode_examples(x, vocab, schema, cfg.max_seq_len) for x in (split.train, split.val, split.test))
    return TinyTask(encoder, vocab, train, val, test)


def reference_prefix_tuning(encoder, train, prefix_params, head_weight, head_bias, *, epochs, batch_size, lr,
                            seed, shuffle_stream, weight_decay=0.01):
    """Plain prefix tuning written directly against the tensor ops: one prefix MLP pair, one head.

    Returns every batch loss in order.
    """
    from prefixsub import tensor as T
    from prefixsub.model import PrefixPair
    from prefixsub.optim import AdamW
    import numpy as np

    cfg = encoder.config
    P, L, d = prefix_params["embedding"].shape[0], cfg.num_layers, cfg.d_model
    params = list(prefix_params.values()) + [head_weight, head_bias]
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    losses = []
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, shuffle_stream, epoch]).permutation(len(train))
        for start in range(0, len(order), batch_size):
            batch = train.batch(order[start:start + batch_size])
            stacked = {}
            for slot in ("key", "value"):
                h = T.tanh(T.matmul(prefix_params["embedding"], prefix_params[f"{slot}.w1"]) + prefix_params[f"{slot}.b1"])
                out = T.matmul(h, prefix_params[f"{slot}.w2"]) + prefix_params[f"{slot}.b2"]
                stacked[slot] = out.reshape(P, L, d)
            prefixes = [PrefixPair(stacked["key"][:, l, :], stacked["value"][:, l, :]) for l in range(L)]
            pooled = encoder.encode(batch, prefixes)
            loss = T.cross_entropy(T.matmul(pooled, head_weight) + head_bias, batch.labels)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
    return losses
