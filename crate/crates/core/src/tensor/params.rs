use super::{Result, Tensor, TensorError};

/// Index of a [`ParamGroup`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub usize);

/// Address of one parameter tensor: its group and position in the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub group: GroupId,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, independently switchable set of parameters.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Param>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values of the group concatenated in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }
}

/// Owner of every model parameter. Each tensor belongs to exactly one group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: impl Into<String>) -> Result<GroupId> {
        let name = name.into();
        if self.group_by_name(&name).is_some() {
            return Err(TensorError::Invalid(format!("duplicate parameter group `{name}`")));
        }
        self.groups.push(ParamGroup {
            name,
            params: Vec::new(),
            trainable: true,
        });
        Ok(GroupId(self.groups.len() - 1))
    }

    pub fn add_param(&mut self, group: GroupId, name: impl Into<String>, value: Tensor) -> ParamId {
        let g = &mut self.groups[group.0];
        g.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId {
            group,
            index: g.params.len() - 1,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn group_mut(&mut self, id: GroupId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn group_by_name(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.groups[id.group.0].params[id.index]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.groups[id.group.0].params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.param(id).value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.groups[id.group.0].trainable
    }

    pub fn set_trainable(&mut self, id: GroupId, trainable: bool) {
        self.groups[id.0].trainable = trainable;
    }

    /// Makes `only` the single trainable group and freezes all others.
    pub fn enable_only(&mut self, only: GroupId) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.trainable = i == only.0;
        }
    }

    pub fn enable_all(&mut self) {
        for g in &mut self.groups {
            g.trainable = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            for p in &mut g.params {
                p.grad = None;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(ParamGroup::num_values).sum()
    }

    /// True when any value in any group is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.groups
            .iter()
            .flat_map(|g| g.params.iter())
            .any(|p| p.value.has_non_finite())
    }

    /// Copies values of `src` into `dst`; the groups must have matching layouts.
    pub fn copy_group_values(&mut self, src: GroupId, dst: GroupId) -> Result<()> {
        let values: Vec<Tensor> = self.groups[src.0].params.iter().map(|p| p.value.clone()).collect();
        let target = &mut self.groups[dst.0].params;
        if target.len() != values.len() {
            return Err(TensorError::Invalid(format!(
                "group layouts differ: {} vs {} tensors",
                values.len(),
                target.len()
            )));
        }
        for (p, v) in target.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_group_values",
                    lhs: v.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(())
    }
}
