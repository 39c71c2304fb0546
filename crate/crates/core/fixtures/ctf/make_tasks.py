"""Regenerate the CTF task bundles under tasks/. Output is deterministic."""
import base64
import codecs
import gzip
import io
import json
import os
import random
import shutil
import tarfile

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tasks")


def bundle(task_id, instruction, flag, category, assets, solution):
    d = os.path.join(ROOT, task_id)
    os.makedirs(os.path.join(d, "assets"))
    entries = []
    for name, data, mode in assets:
        with open(os.path.join(d, "assets", name), "wb") as f:
            f.write(data)
        entries.append({"src": "assets/" + name, "dest": "/ctf/" + name, "mode": mode})
    spec = {
        "id": task_id,
        "instruction": instruction,
        "flag": flag,
        "category": category,
        "assets": entries,
        "solution": solution,
    }
    with open(os.path.join(d, "task.json"), "w") as f:
        json.dump(spec, f, indent=2)
        f.write("\n")


def tar_gz(files):
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.GNU_FORMAT) as tar:
        for name, data in sorted(files.items()):
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o644
            tar.addfile(info, io.BytesIO(data))
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0) as gz:
        gz.write(raw.getvalue())
    return out.getvalue()


def main():
    shutil.rmtree(ROOT, ignore_errors=True)
    rng = random.Random(1337)

    flag = "ctf{b4s3_64_tw1c3_0v3r}"
    once = base64.b64encode(flag.encode())
    bundle(
        "ctf-01",
        "The file /ctf/message.txt holds a message that was encoded more than once. Recover the flag.",
        flag,
        "encoding",
        [("message.txt", base64.b64encode(once) + b"\n", "0644")],
        ["cat /ctf/message.txt", "base64 -d /ctf/message.txt", "base64 -d /ctf/message.txt | base64 -d"],
    )

    flag = "ctf{r0t_4nd_h3x_4r3_n0t_crypt0}"
    cipher = codecs.encode(flag, "rot13").encode().hex()
    bundle(
        "ctf-02",
        "An intercepted note was left at /ctf/cipher.txt. Decode it to find the flag.",
        flag,
        "encoding",
        [("cipher.txt", cipher.encode() + b"\n", "0644")],
        [
            "cat /ctf/cipher.txt",
            "python3 -c \"import codecs; print(codecs.decode(bytes.fromhex(open('/ctf/cipher.txt').read().strip()).decode(), 'rot13'))\"",
        ],
    )

    flag = "ctf{h1dd3n_d0tf1l3s_t3ll_t4l3s}"
    logs = "\n".join("2024-03-%02d 10:%02d:00 login ok user=%s" % (d, d, rng.choice(["ana", "bo", "cy"])) for d in range(1, 29))
    archive = tar_gz(
        {
            "evidence/auth.log": (logs + "\n").encode(),
            "evidence/readme.txt": b"Collected from the workstation. Nothing unusual found.\n",
            "evidence/.cache/notes": ("reminder: " + flag + "\n").encode(),
        }
    )
    bundle(
        "ctf-03",
        "A disk image summary was archived at /ctf/evidence.tar.gz. Somebody left the flag behind in it.",
        flag,
        "forensics",
        [("evidence.tar.gz", archive, "0644")],
        ["tar -xzf /ctf/evidence.tar.gz -C /ctf", "ls -la /ctf/evidence", "cat /ctf/evidence/.cache/notes | grep -o 'ctf{[^}]*}'"],
    )

    flag = "ctf{str1ngs_1n_th3_n01s3}"
    noise = bytes(rng.randrange(256) for _ in range(4096)).replace(b"ctf{", b"ctf[")
    blob = noise[:2600] + flag.encode() + noise[2600:]
    bundle(
        "ctf-04",
        "The file /ctf/blob.bin is mostly garbage. Find the flag inside it.",
        flag,
        "forensics",
        [("blob.bin", blob, "0644")],
        ["grep -a -o 'ctf{[^}]*}' /ctf/blob.bin"],
    )

    flag = "ctf{x0r_1s_1ts_0wn_1nv3rs3}"
    key = 0x5A
    enc = bytes(b ^ key for b in flag.encode())
    checker = (
        "#!/usr/bin/env python3\n"
        "import sys\n"
        "SECRET = %r\n"
        "KEY = 0x5A\n"
        "\n"
        "def check(guess):\n"
        "    return bytes(b ^ KEY for b in guess.encode()) == SECRET\n"
        "\n"
        "if __name__ == '__main__':\n"
        "    guess = sys.argv[1] if len(sys.argv) > 1 else ''\n"
        "    print('correct' if check(guess) else 'wrong')\n"
    ) % enc
    bundle(
        "ctf-05",
        "The program /ctf/checker only accepts the flag. Work out what it accepts.",
        flag,
        "reversing",
        [("checker", checker.encode(), "0755")],
        [
            "/ctf/checker guess",
            "cat /ctf/checker",
            "python3 -c \"import runpy; m = runpy.run_path('/ctf/checker', run_name='x'); print(bytes(b ^ m['KEY'] for b in m['SECRET']).decode())\"",
        ],
    )


main()
