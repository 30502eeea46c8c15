"""Brute-force recomputations used as ground truth in tests.

Each works on plain dicts and shares no code with the package.
"""


def base_tables(store):
    ads = {r.key: frozenset(r.get("tags")) for r in store.scan("Ads")}
    prices = {r.key: r.get("price") for r in store.scan("Prices")}
    return ads, prices


def index_map(ads):
    out = {}
    for key, tags in ads.items():
        for tag in tags:
            out.setdefault(tag, set()).add(key)
    return {tag: frozenset(keys) for tag, keys in out.items()}


def joined(ads, prices):
    return {key: (ads[key], prices[key]) for key in sorted(ads) if key in prices}


def ranked(entries):
    """(key, price) pairs by price descending, key ascending."""
    return sorted(entries, key=lambda kp: (-kp[1], kp[0]))


def per_tag_orders(ads, prices):
    """Full ordered structure per tag plus the all-rows group under None."""
    j = joined(ads, prices)
    groups = {None: [(-p, k) for k, (_, p) in j.items()]}
    for key, (tags, price) in j.items():
        for tag in tags:
            groups.setdefault(tag, []).append((-price, key))
    return {g: sorted(v) for g, v in groups.items()}


def topk(ads, prices, tags, k):
    tags = set(tags)
    hits = [(key, price) for key, (ktags, price) in joined(ads, prices).items()
            if not tags or tags & ktags]
    return ranked(hits)[:k]
