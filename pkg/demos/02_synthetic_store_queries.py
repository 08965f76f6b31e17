"""
Ambiguous store-lookup queries
==============================

The generator fills store and non-store templates. Some words, such as
"orange", appear in both the location and the product lexicon.
"""

from collections import Counter

from jtner.datagen import GenConfig, build_vocab, generate_corpus, load_lexicon, split

corpus = generate_corpus(GenConfig(n_queries=400, store_fraction=0.5, ambiguity_rate=0.4, seed=1))

# %%
for q in corpus[:6]:
    print(f"{int(q.is_store_lookup)}  " + " ".join(f"{t}/{g}" for t, g in zip(q.tokens, q.tags)))

# %%
# The same surface word carries different labels depending on context.
ambiguous = set(load_lexicon()["ambiguous"])
usage = Counter((t, g) for q in corpus for t, g in zip(q.tokens, q.tags) if t in ambiguous)
for word in sorted(ambiguous)[:4]:
    print(word, {tag: n for (w, tag), n in usage.items() if w == word})

# %%
train, test = split(corpus, test_fraction=0.2, seed=1)
print(len(train), "train /", len(test), "test;",
      sum(q.is_store_lookup for q in test), "store lookups held out")
print("vocabulary size:", len(build_vocab(train)))
