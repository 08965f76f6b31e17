"""
Two-pass multitask training against a tagging-only baseline
============================================================

Both models share the seed and data. The multitask model takes a tagging
step, then an intent step on the updated weights at a tenth of the learning
rate. Takes about a minute.
"""

from jtner.datagen import GenConfig, generate_corpus, split
from jtner.encoder import EncoderConfig
from jtner.evaluation import compare, intent_report, mean_intent_by_class, tag_token_lists
from jtner.trainer import TrainConfig, train

corpus = generate_corpus(GenConfig(n_queries=800, seed=1))
train_set, test_set = split(corpus, 0.2, seed=1)
enc = EncoderConfig(seed=1)

base = train(train_set, TrainConfig(mode="base", epochs=10, seed=1), enc)
multitask = train(train_set, TrainConfig(mode="multitask", epochs=10, seed=1), enc)

# %%
print(compare(base, multitask, test_set).to_table())

# %%
# Per-token intent scores: positive across store lookups, negative otherwise.
for t in tag_token_lists(multitask, [["orange", "target", "store"], ["buy", "an", "orange"]]):
    print([(tok, tag, round(float(s), 2)) for tok, tag, s in zip(t.tokens, t.tags, t.scores)])

store_mean, other_mean = mean_intent_by_class(intent_report(multitask, test_set))
print(f"mean intent score: store lookups {store_mean:+.2f}, other queries {other_mean:+.2f}")

# %%
# Summed-loss variant: one pass on ner + 0.1 * intent.
summed = train(train_set, TrainConfig(mode="summed", intent_loss_weight=0.1, epochs=10, seed=1), enc)
print(compare(base, summed, test_set).to_table().replace("multitask", "summed   "))
