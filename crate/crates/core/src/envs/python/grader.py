"""Score a candidate against unit tests, one fresh interpreter per test.

Usage: grader.py JOB.json. The job holds "tests", "entry_point", "timeout"
and either "submission" (source) or "actions" (session transcript to pull
definitions from). Prints one JSON object.
"""
import ast
import json
import subprocess
import sys

RUNNER = r"""
import json, sys
job = json.loads(sys.stdin.read())
ns = {"__name__": "__main__"}
exec(compile(job["submission"], "<submission>", "exec"), ns)
exec(compile(job["test"], "<test>", "exec"), ns)
"""


def definition_key(node):
    if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
        return node.name
    if isinstance(node, (ast.Import, ast.ImportFrom)):
        return ("import", ast.unparse(node))
    if isinstance(node, (ast.Assign, ast.AnnAssign)):
        targets = node.targets if isinstance(node, ast.Assign) else [node.target]
        if all(isinstance(t, ast.Name) for t in targets):
            return ("assign",) + tuple(t.id for t in targets)
    return None


def extract(actions, entry_point):
    """Latest top-level imports, definitions and constant bindings across
    the transcript, or None when entry_point is never defined."""
    defs = {}
    found = False
    for src in actions:
        try:
            tree = ast.parse(src)
        except SyntaxError:
            continue
        for node in tree.body:
            key = definition_key(node)
            if key is None:
                continue
            defs.pop(key, None)
            defs[key] = ast.unparse(node)
            found = found or key == entry_point
    if not found:
        return None
    return "\n\n".join(defs.values()) + "\n"


def run_test(submission, test, timeout):
    payload = json.dumps({"submission": submission, "test": test})
    try:
        proc = subprocess.run(
            [sys.executable, "-c", RUNNER],
            input=payload,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        return {"test": test, "passed": False, "error": "timed out after %ss" % timeout}
    if proc.returncode == 0:
        return {"test": test, "passed": True, "error": None}
    lines = proc.stderr.strip().splitlines()
    return {"test": test, "passed": False, "error": lines[-1] if lines else "exit %d" % proc.returncode}


def main():
    with open(sys.argv[1]) as f:
        job = json.load(f)
    tests = job["tests"]
    result = {"passed": 0, "total": len(tests), "results": [], "error": None, "submission": None}
    submission = job.get("submission")
    if submission is None:
        submission = extract(job.get("actions", []), job["entry_point"])
        if submission is None:
            result["error"] = "no definition of %s found in the session" % job["entry_point"]
    if submission is not None:
        result["submission"] = submission
        try:
            compile(submission, "<submission>", "exec")
        except SyntaxError as e:
            result["error"] = "SyntaxError: %s" % e
    if result["error"] is None:
        for test in tests:
            r = run_test(submission, test, job["timeout"])
            result["results"].append(r)
            result["passed"] += r["passed"]
    print(json.dumps(result))


main()
