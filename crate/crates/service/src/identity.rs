//! Users, groups and roles from a roster file, opaque bearer tokens, and the
//! authorization rule that gates every fabric and orchestrator action.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Result, ServiceError};

pub const DEFAULT_TOKEN_TTL_S: u64 = 3600;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub user_id: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub institution: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Orchestrator,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub members: BTreeMap<String, Role>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub users: Vec<Identity>,
    pub groups: Vec<Group>,
}

impl Roster {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let roster: Roster = serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("roster: {e}")))?;
        roster.validate()?;
        Ok(roster)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, u) in self.users.iter().enumerate() {
            if u.user_id.is_empty() {
                errors.push(crate::error::FieldError::new(format!("users[{i}].user_id"), "must be nonempty"));
            } else if !seen.insert(u.user_id.as_str()) {
                errors.push(crate::error::FieldError::new(format!("users[{i}].user_id"), format!("duplicate user {}", u.user_id)));
            }
        }
        let mut group_ids = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            let at = |f: &str| format!("groups[{i}].{f}");
            if !group_ids.insert(g.group_id.as_str()) {
                errors.push(crate::error::FieldError::new(at("group_id"), format!("duplicate group {}", g.group_id)));
            }
            if g.members.is_empty() {
                errors.push(crate::error::FieldError::new(at("members"), "must be nonempty"));
            }
            let orchestrators = g.members.values().filter(|r| **r == Role::Orchestrator).count();
            if orchestrators != 1 {
                errors.push(crate::error::FieldError::new(at("members"), format!("needs exactly one orchestrator, found {orchestrators}")));
            }
            for uid in g.members.keys().filter(|u| !seen.contains(u.as_str())) {
                errors.push(crate::error::FieldError::new(at("members"), format!("unknown user {uid}")));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::Validation(errors))
        }
    }

    pub fn user(&self, user_id: &str) -> Option<&Identity> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn group(&self, group_id: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn groups_of<'a>(&'a self, user_id: &'a str) -> impl Iterator<Item = &'a Group> + 'a {
        self.groups.iter().filter(move |g| g.members.contains_key(user_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: String,
    pub user_id: String,
    /// Seconds since the Unix epoch.
    pub issued_at: u64,
    pub expires_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    CreateExperiment,
    StartExperiment,
    RegisterEndpoint,
    PollTask,
    SubmitResult,
    ReadMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn into_result(self) -> Result<()> {
        match self {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => Err(ServiceError::Forbidden(reason)),
        }
    }
}

/// Create and start need the orchestrator role in the group; everything else
/// needs membership. With no group given, membership in any group suffices
/// for the endpoint-side actions.
pub fn authorize(roster: &Roster, identity: &Identity, action: Action, group_id: Option<&str>) -> Decision {
    let needs_orchestrator = matches!(action, Action::CreateExperiment | Action::StartExperiment);
    let role = match group_id {
        Some(gid) => match roster.group(gid) {
            None => return Decision::Deny("unknown_group".into()),
            Some(g) => g.members.get(&identity.user_id).copied(),
        },
        None if needs_orchestrator || action == Action::ReadMetrics => return Decision::Deny("group_required".into()),
        None => roster.groups_of(&identity.user_id).next().map(|_| Role::Member),
    };
    match role {
        None => Decision::Deny("not_in_group".into()),
        Some(Role::Member) if needs_orchestrator => Decision::Deny("role_required:orchestrator".into()),
        Some(_) => Decision::Allow,
    }
}

/// Token table plus the roster. Both are behind read-write locks: lookups run
/// concurrently, issuance is serialized.
pub struct IdentityService {
    roster: RwLock<Arc<Roster>>,
    tokens: RwLock<HashMap<String, Token>>,
    clock: Arc<dyn Clock>,
    default_ttl_s: u64,
}

impl IdentityService {
    pub fn new(roster: Roster, clock: Arc<dyn Clock>, default_ttl_s: u64) -> Self {
        Self { roster: RwLock::new(Arc::new(roster)), tokens: RwLock::new(HashMap::new()), clock, default_ttl_s }
    }

    pub fn roster(&self) -> Arc<Roster> {
        self.roster.read().unwrap().clone()
    }

    pub fn issue_token(&self, user_id: &str, ttl_s: Option<u64>) -> Result<Token> {
        if self.roster().user(user_id).is_none() {
            return Err(ServiceError::Unauthenticated(format!("unknown user {user_id}")));
        }
        let ttl = ttl_s.unwrap_or(self.default_ttl_s).max(1);
        let issued_at = self.clock.now_ms() / 1000;
        let mut tokens = self.tokens.write().unwrap();
        let token_id = loop {
            let candidate = format!("{:032x}", rand::random::<u128>());
            if !tokens.contains_key(&candidate) {
                break candidate;
            }
        };
        let token = Token { token_id: token_id.clone(), user_id: user_id.into(), issued_at, expires_at: issued_at + ttl };
        tokens.insert(token_id, token.clone());
        Ok(token)
    }

    /// Expiry is strict: at `expires_at` the token is already invalid.
    pub fn authenticate(&self, token_id: Option<&str>) -> Result<Identity> {
        let token_id = token_id.ok_or_else(|| ServiceError::Unauthenticated("missing bearer token".into()))?;
        let token = self
            .tokens
            .read()
            .unwrap()
            .get(token_id)
            .cloned()
            .ok_or_else(|| ServiceError::Unauthenticated("unknown token".into()))?;
        if self.clock.now_ms() >= token.expires_at.saturating_mul(1000) {
            return Err(ServiceError::TokenExpired);
        }
        self.roster()
            .user(&token.user_id)
            .cloned()
            .ok_or_else(|| ServiceError::Unauthenticated("token owner left the roster".into()))
    }

    pub fn authorize(&self, identity: &Identity, action: Action, group_id: Option<&str>) -> Result<()> {
        authorize(&self.roster(), identity, action, group_id).into_result()
    }
}
