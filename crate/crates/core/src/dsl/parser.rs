use super::lexer::{tokenize, Tok, Token};
use super::{ErrorCode, ExperimentSpec, SourceError, KEYWORDS};
use crate::executor::MonitorSpec;
use crate::interaction::{Checkpoint, InteractionPlan, Role};
use crate::model::{
    ConstraintOp, ConstraintSpec, Direction, Edge, Hardness, MetricDirection, MetricScope,
    MetricSpec, TaskSpec, Value, VariabilityPoint, VpTarget, WorkflowSpec, DEFAULT_TIMEOUT_S,
};
use crate::strategy::{Intent, StrategySpec, DEFAULT_XI};

type PResult<T> = Result<T, SourceError>;

pub(crate) fn parse(source: &str) -> PResult<ExperimentSpec> {
    let tokens = tokenize(source)?;
    if matches!(tokens[0].tok, Tok::Eof) {
        return Err(SourceError::new(1, 1, ErrorCode::EmptyInput, "input is empty"));
    }
    let mut p = Parser { tokens, pos: 0 };
    let spec = p.experiment()?;
    p.expect_eof()?;
    Ok(spec)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error_here(&self, expected: &str) -> SourceError {
        let t = self.peek();
        let code = if t.tok == Tok::Eof {
            ErrorCode::UnexpectedEof
        } else {
            ErrorCode::UnexpectedToken
        };
        SourceError::new(
            t.line,
            t.column,
            code,
            format!("expected {expected}, found {}", t.tok.describe()),
        )
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(w) if w == kw)
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek().tok, Tok::Sym(x) if x == s)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.at_sym(s) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.error_here(&format!("`{kw}`")))
        }
    }

    fn sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.error_here(&format!("`{s}`")))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match &self.peek().tok {
            Tok::Word(w) if KEYWORDS.contains(&w.as_str()) => {
                let t = self.peek();
                Err(SourceError::new(
                    t.line,
                    t.column,
                    ErrorCode::ReservedWord,
                    format!("`{w}` is a reserved word and cannot be used as a name"),
                ))
            }
            Tok::Word(w) => {
                let w = w.clone();
                self.advance();
                Ok(w)
            }
            _ => Err(self.error_here("identifier")),
        }
    }

    fn string(&mut self) -> PResult<String> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            _ => Err(self.error_here("string literal")),
        }
    }

    fn scalar(&mut self) -> PResult<f64> {
        match &self.peek().tok {
            Tok::Number(n) => {
                let t = self.peek();
                let v: f64 = n.parse().map_err(|_| {
                    SourceError::new(t.line, t.column, ErrorCode::InvalidNumber, "bad number")
                })?;
                if !v.is_finite() {
                    return Err(SourceError::new(
                        t.line,
                        t.column,
                        ErrorCode::InvalidNumber,
                        "number out of range",
                    ));
                }
                self.advance();
                Ok(v)
            }
            _ => Err(self.error_here("number")),
        }
    }

    fn int(&mut self) -> PResult<u64> {
        match &self.peek().tok {
            Tok::Number(n) if n.bytes().all(|b| b.is_ascii_digit()) => {
                let t = self.peek();
                let v = n.parse().map_err(|_| {
                    SourceError::new(
                        t.line,
                        t.column,
                        ErrorCode::InvalidNumber,
                        "integer out of range",
                    )
                })?;
                self.advance();
                Ok(v)
            }
            _ => Err(self.error_here("non-negative integer")),
        }
    }

    fn usize(&mut self) -> PResult<usize> {
        let t = self.peek().clone();
        let v = self.int()?;
        usize::try_from(v).map_err(|_| {
            SourceError::new(t.line, t.column, ErrorCode::InvalidNumber, "integer out of range")
        })
    }

    fn value(&mut self) -> PResult<Value> {
        match &self.peek().tok {
            Tok::Number(_) => Ok(Value::Number(self.scalar()?)),
            Tok::Str(_) => Ok(Value::Text(self.string()?)),
            Tok::Word(_) => Ok(Value::Text(self.ident()?)),
            _ => Err(self.error_here("value")),
        }
    }

    fn expect_eof(&mut self) -> PResult<()> {
        if self.peek().tok == Tok::Eof {
            Ok(())
        } else {
            Err(self.error_here("end of input"))
        }
    }

    fn duplicate(&self, at: &Token, what: &str) -> SourceError {
        SourceError::new(
            at.line,
            at.column,
            ErrorCode::DuplicateKey,
            format!("`{what}` given more than once"),
        )
    }

    fn experiment(&mut self) -> PResult<ExperimentSpec> {
        self.keyword("experiment")?;
        let name = self.ident()?;
        self.sym("{")?;
        let intent = self.intent()?;
        let workflow = self.workflow()?;
        let vps = self.variability()?;
        let strategy = self.strategy()?;
        let mut metrics = if self.at_keyword("metrics") {
            self.metrics()?
        } else {
            Vec::new()
        };
        let constraints = if self.at_keyword("constraints") {
            self.constraints()?
        } else {
            Vec::new()
        };
        let interaction = if self.at_keyword("interaction") {
            self.interaction()?
        } else {
            InteractionPlan::default()
        };
        let monitor = if self.at_keyword("monitor") {
            Some(self.monitor()?)
        } else {
            None
        };
        self.sym("}")?;
        assign_directions(&mut metrics, &intent);
        Ok(ExperimentSpec {
            name,
            workflow,
            vps,
            intent,
            strategy,
            metrics,
            constraints,
            interaction,
            monitor,
        })
    }

    fn intent(&mut self) -> PResult<Intent> {
        self.keyword("intent")?;
        let direction = if self.eat_keyword("maximize") {
            Direction::Maximize
        } else if self.eat_keyword("minimize") {
            Direction::Minimize
        } else {
            return Err(self.error_here("`maximize` or `minimize`"));
        };
        let metric = self.ident()?;
        self.sym(";")?;
        Ok(Intent { direction, metric })
    }

    fn workflow(&mut self) -> PResult<WorkflowSpec> {
        self.keyword("workflow")?;
        self.sym("{")?;
        let mut wf = WorkflowSpec::default();
        while self.at_keyword("task") {
            wf.tasks.push(self.task()?);
        }
        while !self.at_sym("}") {
            let mut chain = vec![self.ident()?];
            self.sym("->")?;
            chain.push(self.ident()?);
            while self.eat_sym("->") {
                chain.push(self.ident()?);
            }
            self.sym(";")?;
            wf.edges
                .extend(chain.windows(2).map(|w| Edge::new(w[0].clone(), w[1].clone())));
        }
        self.sym("}")?;
        Ok(wf)
    }

    fn task(&mut self) -> PResult<TaskSpec> {
        self.keyword("task")?;
        let name = self.ident()?;
        let mut task = if self.eat_keyword("impl") {
            let cmd = self.string()?;
            TaskSpec::automated(name, Some(&cmd))
        } else if self.eat_keyword("abstract") {
            TaskSpec::automated(name, None)
        } else if self.eat_keyword("manual") {
            TaskSpec::manual(name)
        } else {
            return Err(self.error_here("`impl`, `abstract` or `manual`"));
        };
        task.timeout_s = DEFAULT_TIMEOUT_S;
        if self.eat_keyword("params") {
            self.sym("(")?;
            loop {
                let at = self.peek().clone();
                let key = self.ident()?;
                self.sym("=")?;
                let v = self.scalar()?;
                if task.params.insert(key.clone(), Value::Number(v)).is_some() {
                    return Err(self.duplicate(&at, &key));
                }
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.sym(")")?;
        }
        if self.eat_keyword("inputs") {
            self.sym("(")?;
            loop {
                let at = self.peek().clone();
                let key = self.ident()?;
                self.sym("=")?;
                let v = self.string()?;
                if task.inputs.insert(key.clone(), v).is_some() {
                    return Err(self.duplicate(&at, &key));
                }
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.sym(")")?;
        }
        self.sym(";")?;
        Ok(task)
    }

    fn variability(&mut self) -> PResult<Vec<VariabilityPoint>> {
        self.keyword("variability")?;
        self.sym("{")?;
        let mut vps = Vec::new();
        while self.eat_keyword("vp") {
            let name = self.ident()?;
            self.sym(":")?;
            let target = if self.eat_keyword("impl") {
                VpTarget::Implementation {
                    task: self.parenthesized_ident()?,
                }
            } else if self.eat_keyword("deploy") {
                VpTarget::Deployment {
                    task: self.parenthesized_ident()?,
                }
            } else if self.eat_keyword("param") {
                let (task, param) = self.dotted_pair()?;
                VpTarget::Parameter { task, param }
            } else if self.eat_keyword("input") {
                let (task, input) = self.dotted_pair()?;
                VpTarget::Input { task, input }
            } else {
                return Err(self.error_here("`impl`, `param`, `input` or `deploy`"));
            };
            self.keyword("in")?;
            self.sym("{")?;
            let mut domain = vec![self.value()?];
            while self.eat_sym(",") {
                domain.push(self.value()?);
            }
            self.sym("}")?;
            self.sym(";")?;
            vps.push(VariabilityPoint {
                name,
                target,
                domain,
            });
        }
        self.sym("}")?;
        Ok(vps)
    }

    fn parenthesized_ident(&mut self) -> PResult<String> {
        self.sym("(")?;
        let id = self.ident()?;
        self.sym(")")?;
        Ok(id)
    }

    fn dotted_pair(&mut self) -> PResult<(String, String)> {
        self.sym("(")?;
        let a = self.ident()?;
        self.sym(".")?;
        let b = self.ident()?;
        self.sym(")")?;
        Ok((a, b))
    }

    fn named_int(&mut self, key: &str) -> PResult<u64> {
        self.keyword(key)?;
        self.sym("=")?;
        self.int()
    }

    fn strategy(&mut self) -> PResult<StrategySpec> {
        self.keyword("strategy")?;
        let spec = if self.eat_keyword("grid") {
            StrategySpec::Grid
        } else if self.eat_keyword("random") {
            self.sym("(")?;
            let n = self.named_int("n")? as usize;
            self.sym(",")?;
            let seed = self.named_int("seed")?;
            self.sym(")")?;
            StrategySpec::Random { n, seed }
        } else if self.eat_keyword("bayesian") {
            self.sym("(")?;
            let n = self.named_int("n")? as usize;
            self.sym(",")?;
            let init = self.named_int("init")? as usize;
            self.sym(",")?;
            let seed = self.named_int("seed")?;
            self.sym(")")?;
            StrategySpec::Bayesian {
                n,
                init,
                seed,
                xi: DEFAULT_XI,
            }
        } else {
            return Err(self.error_here("`grid`, `random` or `bayesian`"));
        };
        self.sym(";")?;
        Ok(spec)
    }

    fn metrics(&mut self) -> PResult<Vec<MetricSpec>> {
        self.keyword("metrics")?;
        self.sym("{")?;
        let mut out = Vec::new();
        while self.eat_keyword("metric") {
            let name = self.ident()?;
            let scope = if self.eat_keyword("workflow") {
                MetricScope::Workflow
            } else if self.eat_keyword("task") {
                MetricScope::Task(self.parenthesized_ident()?)
            } else if self.eat_keyword("output") {
                MetricScope::Output(self.parenthesized_ident()?)
            } else {
                return Err(self.error_here("`workflow`, `task` or `output`"));
            };
            let unit = match self.peek().tok {
                Tok::Str(_) => Some(self.string()?),
                _ => None,
            };
            self.sym(";")?;
            out.push(MetricSpec {
                name,
                scope,
                unit,
                direction: MetricDirection::Informational,
            });
        }
        self.sym("}")?;
        Ok(out)
    }

    fn constraints(&mut self) -> PResult<Vec<ConstraintSpec>> {
        self.keyword("constraints")?;
        self.sym("{")?;
        let mut out = Vec::new();
        while self.eat_keyword("metric") {
            let metric = self.ident()?;
            let op = if self.eat_sym("<=") {
                ConstraintOp::Le
            } else if self.eat_sym(">=") {
                ConstraintOp::Ge
            } else {
                return Err(self.error_here("`<=` or `>=`"));
            };
            let bound = self.scalar()?;
            let hardness = if self.eat_keyword("soft") {
                Hardness::Soft
            } else {
                Hardness::Hard
            };
            self.sym(";")?;
            out.push(ConstraintSpec {
                metric,
                op,
                bound,
                hardness,
            });
        }
        self.sym("}")?;
        Ok(out)
    }

    fn interaction(&mut self) -> PResult<InteractionPlan> {
        self.keyword("interaction")?;
        self.sym("{")?;
        let mut checkpoints = Vec::new();
        while self.eat_keyword("checkpoint") {
            self.keyword("after")?;
            let after = self.usize()?;
            self.keyword("configurations")?;
            self.keyword("role")?;
            let role = if self.eat_keyword("supervisor") {
                Role::Supervisor
            } else if self.eat_keyword("validator") {
                Role::Validator
            } else {
                return Err(self.error_here("`supervisor` or `validator`"));
            };
            self.keyword("cost")?;
            let cost_min = self.scalar()?;
            self.keyword("min")?;
            self.sym(";")?;
            checkpoints.push(Checkpoint {
                after,
                role,
                cost_min,
            });
        }
        self.keyword("budget")?;
        let budget_min = self.scalar()?;
        self.keyword("min")?;
        self.sym(";")?;
        self.sym("}")?;
        Ok(InteractionPlan {
            checkpoints,
            budget_min,
        })
    }

    fn monitor(&mut self) -> PResult<MonitorSpec> {
        self.keyword("monitor")?;
        self.sym("{")?;
        self.keyword("metric")?;
        let metric = self.ident()?;
        self.keyword("threshold")?;
        let threshold = self.scalar()?;
        self.keyword("window")?;
        let window = self.usize()?;
        self.keyword("min_new")?;
        let min_new = self.int()?;
        self.sym(";")?;
        self.sym("}")?;
        Ok(MonitorSpec {
            metric,
            threshold,
            window,
            min_new,
        })
    }
}

/// The intent metric inherits the intent's direction; builtin cost metrics
/// are minimized; everything else is informational.
pub(crate) fn assign_directions(metrics: &mut [MetricSpec], intent: &Intent) {
    for m in metrics {
        m.direction = if m.name == intent.metric {
            match intent.direction {
                Direction::Maximize => MetricDirection::Maximize,
                Direction::Minimize => MetricDirection::Minimize,
            }
        } else if crate::model::BUILTIN_METRICS.contains(&m.name.as_str()) {
            MetricDirection::Minimize
        } else {
            MetricDirection::Informational
        };
    }
}
