//! Prompt templates.
//!
//! Placeholders are `{name}`; `{{` and `}}` are literal braces. Rendering
//! fails on any placeholder without a value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StrategyKind;

/// How an environment is described to a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvProfile {
    /// Language name used in prose, e.g. `SQL`.
    pub language: String,
    /// Fence tag for code blocks, e.g. `sql`.
    pub fence: String,
    /// What the agent is talking to, e.g. `MySQL database`.
    pub setting: String,
}

impl EnvProfile {
    pub fn for_env(env: &str) -> Self {
        let (language, fence, setting) = match env {
            "sql" => ("SQL", "sql", "MySQL database"),
            "python" => ("Python", "python", "Python 3 interpreter"),
            "ctf" => ("Bash", "bash", "Ubuntu Linux terminal"),
            _ => ("Bash", "bash", "Bourne shell"),
        };
        Self {
            language: language.into(),
            fence: fence.into(),
            setting: setting.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    /// First message of an episode.
    pub initial: String,
    /// Carries the task (`{query}`).
    pub instruction: String,
    /// Feedback after each action (`{observation}`, `{reward}`, `{turn}`,
    /// `{step}`).
    pub observation: String,
    /// Asks for a numbered plan.
    #[serde(default)]
    pub plan: Option<String>,
    /// Starts plan execution (`{step}` is the first item).
    #[serde(default)]
    pub execute_plan: Option<String>,
    /// Opens the post-plan refinement loop.
    #[serde(default)]
    pub refine: Option<String>,
    /// Sent after a reply that could not be read as an action.
    pub format_reminder: String,
}

/// Substitute `{name}` placeholders.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let rest = &template[i + 1..];
                let end = rest
                    .find('}')
                    .ok_or_else(|| format!("unclosed placeholder at byte {i}"))?;
                let name = &rest[..end];
                let value = vars
                    .get(name)
                    .ok_or_else(|| format!("no value for placeholder {{{name}}}"))?;
                out.push_str(value);
                for _ in 0..=end {
                    chars.next();
                }
            }
            '}' => return Err(format!("stray `}}` at byte {i}")),
            _ => out.push(c),
        }
    }
    Ok(out)
}

/// Placeholders a template uses.
pub fn placeholders(template: &str) -> Vec<String> {
    let unescaped = template.replace("{{", "").replace("}}", "");
    let mut out = Vec::new();
    let mut rest = unescaped.as_str();
    while let Some(start) = rest.find('{') {
        let Some(end) = rest[start..].find('}') else { break };
        out.push(rest[start + 1..start + end].to_string());
        rest = &rest[start + end + 1..];
    }
    out
}

const CODE_FORMAT: &str = "Reply with a single {language} command in a fenced block:\n\n```{fence}\n<your {language} code>\n```\n";

const TRY_AGAIN_INITIAL: &str = "## TASK
You write {language} to answer a user's question. You cannot answer directly: instead you run {language} commands against a {setting} and read what comes back, one command per turn.

## RULES
1. Never ask the user anything.
2. Reply with {language} code only, no commentary.

## FORMAT
";

const TRY_AGAIN_FEEDBACK: &str = "
Use your commands both to explore the {setting} (for a database, list and describe its tables first) and to produce the final answer.

## FEEDBACK
After each command you receive:

Output: <text>
Reward: <number from 0 to 1>

Output is whatever your command printed. Reward scores how close that result is to the correct answer; 1 means solved.
";

const REACT_INITIAL: &str = "Answer a question by working with a {setting} through {language}. Alternate Thought, Action and Observation steps. A Thought reasons about what you know so far. An Action is one of:
(1) execute[<code>], which runs {language} code on the {setting}
(2) submit, which declares the latest observation to be the answer

Example:

Question: Which stations are in Bergen?
Thought 1: I need the table that lists stations.
Action 1: execute[SHOW TABLES]
Observation 1: [('host',), ('program',), ('station',)]
Thought 2: The station table should have a city column. I will check.
Action 2: execute[DESC station]
Observation 2: [('id', 'int', 'NO', 'PRI', None, ''), ('name', 'varchar(64)', 'NO', '', None, ''), ('city', 'varchar(64)', 'NO', '', None, '')]
Thought 3: I can filter on city now.
Action 3: execute[SELECT name FROM station WHERE city = 'Bergen']
Observation 3: [('Harbour FM',), ('Fjord Waves',)]
Thought 4: That answers the question.
Action 4: submit

Write exactly one Thought and one Action per reply.
";

const PLAN_MESSAGE: &str = "Before touching the {setting}, work out how to answer the question below. Describe a numbered plan: a short sequence of {language} steps that will reveal the answer. Write only the plan, one step per line.

Example:

Question: Which stations are in Bergen?
Plan:
1. List the available tables.
2. Describe the table that looks like it holds stations.
3. Select the station names whose city is Bergen.

Question: {query}
Plan:
";

const EXECUTE_PLAN: &str = "Now carry out your plan against the {setting} using {language}. Each turn you get:

```
Observation: output of your previous command
Step: the plan step to do next
```

Reply with {language} code only, in a fenced block:

```{fence}
<your {language} code>
```

Step: {step}
";

const REFINE: &str = "The plan is done but the answer still looks wrong. Keep working on it. Each turn you get:

```
Observation: output of your previous command
```

Reply with {language} code only, in a fenced block:

```{fence}
<your {language} code>
```

Observation: {observation}
";

const CTF_INITIAL: &str = "You are a seasoned Capture the Flag competitor.";

const CTF_INSTRUCTION: &str = "You are working in the /ctf directory of an Ubuntu machine. {query} A flag of the form ctf{{...}} is hidden somewhere; find it by running terminal commands one at a time. Start each action with `cmd`, for example `cmd ls -la`. To run Python, use `cmd python3 -c \"<code>\"`. You will see each command's output. When you have the flag, reply `submit <flag>`. Reply with the action only, no explanation.";

impl PromptTemplateSet {
    /// Templates for `kind` in environment `env`.
    pub fn for_strategy(kind: StrategyKind, env: &str) -> Self {
        let code_turn = format!("{TRY_AGAIN_INITIAL}{CODE_FORMAT}{TRY_AGAIN_FEEDBACK}");
        let mut set = match kind {
            StrategyKind::React => Self {
                initial: REACT_INITIAL.into(),
                instruction: "Question: {query}".into(),
                observation: "Observation {turn}: {observation}".into(),
                plan: None,
                execute_plan: None,
                refine: None,
                format_reminder: "Observation {turn}: Could not read an action. Reply with `Thought N: ...` followed by `Action N: execute[<code>]` or `Action N: submit`.".into(),
            },
            StrategyKind::PlanSolve | StrategyKind::PlanSolveRefine => Self {
                initial: code_turn.replace("Output: <text>\nReward: <number from 0 to 1>", "Output: <text>")
                    .replace(" Reward scores how close that result is to the correct answer; 1 means solved.", ""),
                instruction: "Query: \"{query}\"".into(),
                observation: "Observation: {observation}\nStep: {step}".into(),
                plan: Some(PLAN_MESSAGE.into()),
                execute_plan: Some(EXECUTE_PLAN.into()),
                refine: (kind == StrategyKind::PlanSolveRefine).then(|| REFINE.into()),
                format_reminder: "Could not read a command. Reply with {language} code in a fenced block.".into(),
            },
            _ => Self {
                initial: code_turn,
                instruction: "Query: \"{query}\"".into(),
                observation: "Output: {observation}\nReward: {reward}".into(),
                plan: None,
                execute_plan: None,
                refine: None,
                format_reminder: "Could not read a command. Reply with {language} code in a fenced block.".into(),
            },
        };
        if env == "ctf" && matches!(kind, StrategyKind::SingleTurn | StrategyKind::TryAgain | StrategyKind::Human) {
            set.initial = CTF_INITIAL.into();
            set.instruction = CTF_INSTRUCTION.into();
            set.observation = "Output: {observation}".into();
        }
        set
    }

    /// Check that every placeholder is one the harness supplies.
    pub fn validate(&self) -> Result<(), String> {
        const KNOWN: [&str; 8] = ["language", "fence", "setting", "query", "observation", "reward", "turn", "step"];
        let all = [
            Some(&self.initial),
            Some(&self.instruction),
            Some(&self.observation),
            self.plan.as_ref(),
            self.execute_plan.as_ref(),
            self.refine.as_ref(),
            Some(&self.format_reminder),
        ];
        for t in all.into_iter().flatten() {
            if let Some(p) = placeholders(t).into_iter().find(|p| !KNOWN.contains(&p.as_str())) {
                return Err(format!("unknown placeholder {{{p}}}"));
            }
        }
        Ok(())
    }
}
