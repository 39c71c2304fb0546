"""Interactive interpreter driven by length-prefixed JSON frames on stdio.

Request:  {"op": "exec" | "eval" | "reset", "code": str}
Response: {"ok": bool, "output": str, "value": str | null}

Each frame is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON. "exec" runs statements and echoes the repr of a trailing
expression; "eval" returns the repr of one expression; "reset" clears all
definitions.
"""
import ast
import builtins
import json
import os
import struct
import sys
import tempfile
import traceback

OUTPUT_CAP = 1 << 20

# Keep the frame channel away from user code: fds 0 and 1 are swapped for
# /dev/null and a capture file while code runs.
FRAME_IN = os.dup(0)
FRAME_OUT = os.dup(1)
_null = os.open(os.devnull, os.O_RDONLY)
os.dup2(_null, 0)
os.close(_null)
os.dup2(2, 1)
sys.stdin = open(os.devnull)


def read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = os.read(FRAME_IN, n - len(buf))
        if not chunk:
            sys.exit(0)
        buf += chunk
    return buf


def read_frame():
    (n,) = struct.unpack(">I", read_exact(4))
    return json.loads(read_exact(n).decode("utf-8"))


def write_frame(obj):
    data = json.dumps(obj).encode("utf-8")
    view = memoryview(struct.pack(">I", len(data)) + data)
    while view:
        view = view[os.write(FRAME_OUT, view):]


def fresh_namespace():
    return {"__name__": "__main__", "__builtins__": builtins}


namespace = fresh_namespace()


def user_traceback():
    etype, value, tb = sys.exc_info()
    # drop the mediator's own frames
    while tb is not None and tb.tb_frame.f_code.co_filename == __file__:
        tb = tb.tb_next
    return "".join(traceback.format_exception(etype, value, tb))


def run(code, mode):
    capture = tempfile.TemporaryFile()
    saved = os.dup(1), os.dup(2)
    os.dup2(capture.fileno(), 1)
    os.dup2(capture.fileno(), 2)
    ok, value = True, None
    try:
        if mode == "eval":
            value = repr(eval(compile(code, "<stdin>", "eval"), namespace))
        else:
            tree = ast.parse(code, "<stdin>", "exec")
            last = None
            if tree.body and isinstance(tree.body[-1], ast.Expr):
                last = tree.body.pop()
            exec(compile(tree, "<stdin>", "exec"), namespace)
            if last is not None:
                result = eval(compile(ast.Expression(last.value), "<stdin>", "eval"), namespace)
                if result is not None:
                    value = repr(result)
                    print(value)
    except SystemExit as e:
        ok = False
        print("SystemExit: %s" % (e.code,), file=sys.stderr)
    except BaseException:
        ok = False
        sys.stderr.write(user_traceback())
    finally:
        sys.stdout.flush()
        sys.stderr.flush()
        os.dup2(saved[0], 1)
        os.dup2(saved[1], 2)
        os.close(saved[0])
        os.close(saved[1])
    capture.seek(0)
    raw = capture.read(OUTPUT_CAP + 1)
    capture.close()
    output = raw[:OUTPUT_CAP].decode("utf-8", "replace")
    return {"ok": ok, "output": output, "value": value}


def main():
    global namespace
    while True:
        try:
            req = read_frame()
            op = req.get("op")
            code = req.get("code") or ""
        except (ValueError, AttributeError) as e:
            write_frame({"ok": False, "output": "bad request: %s\n" % e, "value": None})
            continue
        if op == "reset":
            namespace = fresh_namespace()
            write_frame({"ok": True, "output": "", "value": None})
        elif op in ("exec", "eval"):
            write_frame(run(code, op))
        else:
            write_frame({"ok": False, "output": "unknown op %r\n" % (op,), "value": None})


main()
