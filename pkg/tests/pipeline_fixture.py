"""Hand-built 500-record pipeline input with planted violations and the exact expected outcome."""

from itertools import permutations

from vlpretrain.synth import CLASS_NAMES

PAIRS = list(permutations(CLASS_NAMES, 2))


def _rec(i, tags, texts, image_id=None, **over):
    rec = {"image_id": image_id or f"fx-{i:04d}", "page_lang": "en", "is_dominant": True, "width": 640,
           "height": 480, "content_flags": [], "tags": list(tags),
           "candidate_texts": [{"source": s, "text": t} for s, t in texts]}
    rec.update(over)
    return rec


def full_caption(a, b):
    return f"photo of the {a} and the {b} in the park"


def build_records():
    recs = []
    for i in range(500):
        a, b = PAIRS[i]
        good = [("alt", full_caption(a, b))]
        if i < 40:
            recs.append(_rec(i, (a, b), good, page_lang="fr"))
        elif i < 70:
            recs.append(_rec(i, (a, b), good, is_dominant=False))
        elif i < 100:
            recs.append(_rec(i, (a, b), good, width=300, height=500))
        elif i < 110:
            recs.append(_rec(i, (a, b), good, width=301, height=301))
        elif i < 140:
            recs.append(_rec(i, (a, b), good, content_flags=["racy"] if i % 2 else ["pornographic"]))
        elif i < 145:
            r = _rec(i, (a, b), good)
            del r["width"]
            recs.append(r)
        elif i < 445:
            j = i - 145
            bad = (f"{a} {b}", f"the {a} zqxv wplk frmb", "a happy man walking on the street at night")[j % 3]
            texts = good + [("title", f"click here photo of the {a} on the grass www.shop.com/{a}.jpg"),
                            ("surrounding", bad)]
            recs.append(_rec(i, (a, b), texts))
        elif i < 475:
            src = i - 300  # same image as record 145..174, found on another page
            sa, sb = PAIRS[src]
            recs.append(_rec(i, (sa, sb), [("alt", f"photo of the {sa} near the house")], image_id=f"fx-{src:04d}"))
        elif i < 487:
            recs.append(_rec(i, ("dog", "cat"), [("alt", "picture of the dog with the cat")]))
        elif i < 497:
            recs.append(_rec(i, ("bus", "car"), [("alt", "picture of the bus with the car")]))
        else:
            recs.append(_rec(i, (a, b), good))
    return recs


EXPECTED_STATS = {
    "images": {"input": 500, "kept": 365,
               "dropped": {"content": 30, "dominant": 30, "invalid": 5, "lang": 40, "size": 30}},
    "sentences": {"input": 965, "kept": 765, "dropped": {"length": 100, "oov": 100}},
    "scoring": {"input": 765, "kept": 665, "dropped": {"low_score": 100}},
    "best_per_image": {"input": 665, "kept": 335, "dropped": {"not_best": 330}},
    "dedup": {"input": 335, "kept": 323, "dropped": {"over_duplicated": 12}},
}


def expected_output():
    """image_id -> kept caption."""
    out = {}
    for i in list(range(100, 110)) + list(range(145, 445)) + list(range(497, 500)):
        out[f"fx-{i:04d}"] = full_caption(*PAIRS[i])
    for i in range(487, 497):
        out[f"fx-{i:04d}"] = "picture of the bus with the car"
    return out
