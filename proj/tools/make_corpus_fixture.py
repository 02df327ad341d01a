"""Writes fixtures/corpus.jsonl, the offline document set for the local backend.

The set holds the ten recorded skincare results plus short buying-guide style
pages for each product family used by the synthetic catalog.
"""
import json
import sys

FAMILIES = {
    "Moisturizing Cream": ["dry skin", "barrier repair", "ceramides", "overnight hydration"],
    "Face Serum": ["vitamin c", "brightening", "hyaluronic acid", "fine lines"],
    "Gentle Shampoo": ["scalp care", "tear free", "color safe", "daily wash"],
    "Matte Lipstick": ["long wear", "pigment", "lip liner", "velvet finish"],
    "Sunscreen SPF 50": ["broad spectrum", "uva uvb", "water resistant", "no white cast"],
    "Foaming Cleanser": ["oily skin", "pore cleansing", "salicylic acid", "makeup removal"],
    "Hydrating Mask": ["sheet mask", "overnight mask", "plumping", "soothing aloe"],
    "Body Lotion": ["shea butter", "fast absorbing", "rough patches", "fragrance free"],
}
PAGES = [
    ("Best {f} Picks of the Year", "Our editors tested every {lf} for {a} and {b}. Top choices balance {c} with {d} at a fair price."),
    ("How to Choose a {f}", "A {lf} should match your routine: look for {a}, check labels for {b}, and prefer formulas with {c}."),
    ("{f} Reviews from Real Buyers", "Shoppers who bought a {lf} praise {d} and {a}; several mention {b} after two weeks of use."),
    ("{f} vs Alternatives", "Compared with similar products, a good {lf} wins on {c} and {a}, while cheaper options skip {d}."),
]


def main(table7, out_path):
    rows = []
    for line in open(table7, encoding="utf-8"):
        rec = json.loads(line)
        rows.append({"title": rec["title"], "snippet": rec["snippet"], "url": rec["url"]})
    for fi, (fam, traits) in enumerate(FAMILIES.items()):
        a, b, c, d = traits
        for pi, (title, body) in enumerate(PAGES):
            rows.append({
                "title": title.format(f=fam),
                "snippet": body.format(lf=fam.lower(), a=a, b=b, c=c, d=d),
                "url": f"https://fixture.invalid/guides/{fi}/{pi}",
            })
    with open(out_path, "w", encoding="utf-8") as out:
        for r in rows:
            out.write(json.dumps(r, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:3])
