"""Regenerates fixtures/table7.jsonl and the matching prompt golden files.

Reads the retrieval table from the paper text, strips highlight macros,
decodes <u>XXXX escapes, and writes one replay record per result. The golden
prompt is rendered here in Python so the C++ renderer is checked against an
independent implementation.
"""
import json
import re
import sys

QUERY = ("recommendation product nourishing cream designed dry soothing gentle "
         "fragrance-free formula")
REC_PROMPT = ('A user has bought "Olay Regenerist Micro-Sculpting Cream", '
              '"CeraVe Moisturizing Cream", and "Aveeno Daily Moisturizing Lotion" in the previous. '
              'Please recommend the next item for this user to buy from the following item title set: '
              '"Skin Rocks The Rich Moisturiser", "Vichy Mineral 89 Rich Cream", and '
              '"Baby Jergens Soothing Cream". The recommendation is')
PLAIN_HEADER = ("Below is an instruction that describes a task. Please write a response that "
                "appropriately completes the request.")
HEADER = ("Below is an instruction that describes a task, paired with webpages that provide "
          "further context. Write a response that appropriately completes the request.")


def fnv1a64(text: str) -> str:
    h = 0xcbf29ce484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def clean(s: str) -> str:
    s = re.sub(r"\\highlight[a-z]\{([^}]*)\}", r"\1", s)
    s = re.sub(r"<u>([0-9a-fA-F]{4})", lambda m: chr(int(m.group(1), 16)), s)
    return s


def main(paper, fixture, golden, plain_golden):
    rows = []
    pat = re.compile(r"^\s*(\d+)\. Title: ``(.*?)''\. Content: ``(.*?)''\.? \\\\\s*$")
    for line in open(paper, encoding="utf-8"):
        m = pat.match(line)
        if m and "Title:" in line:
            rows.append((int(m.group(1)), clean(m.group(2)), clean(m.group(3))))
    assert [r[0] for r in rows] == list(range(1, 11)), rows
    h = fnv1a64(QUERY.strip())
    with open(fixture, "w", encoding="utf-8") as out:
        for rank, title, snippet in rows:
            rec = {"query_hash": h, "rank": rank, "title": title, "snippet": snippet,
                   "url": f"https://fixture.invalid/table7/{rank}"}
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
    lines = [f"[{rank}] Title: {title}. Content: {snippet[:512]}" for rank, title, snippet in rows]
    body = ";\n".join(lines) + ".\n"
    with open(golden, "w", encoding="utf-8") as out:
        out.write(HEADER + "\n\n" + REC_PROMPT + "\n\n" + body)
    with open(plain_golden, "w", encoding="utf-8") as out:
        out.write(PLAIN_HEADER + "\n\n" + REC_PROMPT + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:5])
